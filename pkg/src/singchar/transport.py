"""Transport of probability measures by the broken characteristic field.

Particles with weights are moved by the vectorised Euler integrator. The
verifiers test the weak continuity equation against Fourier modes, the
integrated energy identity, energy-average growth and the mass carried by a
neighbourhood of the singular set.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .characteristics import _euler_step, _interp, _intrinsic_run, _segment_costs, lambda_hat
from .laxoleinik import _check_horizon, default_speed_bound
from .geometry import reduce, wrap_displacement
from .selection import select_batch
from .singularity import is_singular

logger = logging.getLogger(__name__)


@dataclass
class ParticleCloud:
    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(self.positions),):
            raise ValueError("weights must have one entry per particle")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("weights must be a probability vector")

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def uniform(cls, n: int, dim: int = 1, *, seed: int | None = None) -> "ParticleCloud":
        """Cell-centred lattice with about n points (seed None) or n iid uniform points."""
        if seed is None:
            m = int(round(n ** (1.0 / dim)))
            g = (np.arange(m) + 0.5) / m
            pts = np.stack(np.meshgrid(*([g] * dim), indexing="ij"), -1).reshape(-1, dim)
        else:
            pts = np.random.default_rng(seed).random((n, dim))
        return cls(pts, np.full(len(pts), 1.0 / len(pts)))


@dataclass
class CloudEvolution:
    times: np.ndarray
    snapshots: np.ndarray
    weights: np.ndarray
    h: float
    cost: np.ndarray
    phi_start: np.ndarray
    phi_end: np.ndarray
    steps: dict = field(default_factory=dict)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def positions_at(self, t: float) -> np.ndarray:
        """Lifted positions at time t, linear between the bracketing snapshots."""
        if not 0.0 <= t <= self.T + 1e-12:
            raise ValueError("t outside the evolved interval")
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        t0, t1 = self.times[k], self.times[k + 1]
        a = (t - t0) / (t1 - t0)
        return (1 - a) * self.snapshots[k] + a * self.snapshots[k + 1]

    def to_csv(self, path) -> None:
        m, n, d = self.snapshots.shape
        t = np.repeat(self.times, n)
        ids = np.tile(np.arange(n), m)
        x = reduce(self.snapshots).reshape(-1, d)
        w = np.tile(self.weights, m)
        data = np.column_stack([t, ids, x, w])
        header = ",".join(["t", "particle_id"] + [f"x_{i}" for i in range(d)] + ["weight"])
        fmt = ["%.17g", "%d"] + ["%.17g"] * d + ["%.17g"]
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)


def default_probe_times(T_end: float, spacing: float = 0.5) -> np.ndarray:
    """t = 0, spacing, 2 spacing, ... strictly before T_end."""
    return np.arange(0.0, T_end - 1e-12, spacing)


def evolve_cloud(model, phi, cloud: ParticleCloud, T_end: float, h: float, *, snapshot_every: float = 0.1,
                 probe_times=None, method: str = "euler", width: float = 2.0 ** -7) -> CloudEvolution:
    """Move every particle along its strict singular characteristic.

    ``method='euler'`` steps the whole cloud with the broken Euler scheme;
    ``method='intrinsic'`` runs the intrinsic construction (partition width
    ``width``) per particle and samples it on the same step grid. Snapshots are
    kept every ``snapshot_every`` time units. At each probe time the states at
    the step indices n, n+1 are stored for the continuity check.
    """
    if not h > 0 or not T_end > 0:
        raise ValueError("h and T_end must be positive")
    if method not in ("euler", "intrinsic"):
        raise ValueError("method must be 'euler' or 'intrinsic'")
    nsteps = int(np.ceil(T_end / h - 1e-9))
    every = max(1, int(round(snapshot_every / h)))
    probes = default_probe_times(T_end) if probe_times is None else np.asarray(probe_times, dtype=float)
    probe_idx = {int(round(t / h)): float(t) for t in probes if int(round(t / h)) < nsteps}
    X = reduce(cloud.positions.copy())
    phi0 = phi.value(X, reduced=False)
    if method == "euler":
        step = _euler_stepper(model, phi, X, h)
    else:
        step = _intrinsic_stepper(model, phi, X, h, nsteps, width)
    cost = np.zeros(len(X))
    snaps, times, steps = [X.copy()], [0.0], {}
    for n in range(nsteps):
        Xn, c = step(n, X)
        if n in probe_idx:
            steps[probe_idx[n]] = (X.copy(), Xn.copy())
        cost += c
        X = Xn
        if (n + 1) % every == 0 or n + 1 == nsteps:
            snaps.append(X.copy())
            times.append((n + 1) * h)
    logger.info("evolved %d particles over %d steps (%s)", len(X), nsteps, method)
    return CloudEvolution(np.array(times), np.stack(snaps), cloud.weights.copy(), h, cost, phi0,
                          phi.value(X, reduced=False), steps)


def _euler_stepper(model, phi, X0, h):
    state = {"start": None}

    def step(n, X):
        Xn, c, _, state["start"] = _euler_step(model, phi, X, h, start=state["start"], keep_end=True)
        return Xn, c
    return step


def _intrinsic_stepper(model, phi, X0, h, nsteps, width):
    lam = default_speed_bound(model, getattr(phi, "lipschitz_constant", None))
    _check_horizon(model, width, lam, None)
    T_end = nsteps * h
    grid = np.arange(nsteps + 1) * h
    paths, costs = [], []
    for x in X0:
        run = _intrinsic_run(model, phi, x, T_end, width, set())
        paths.append(_interp(run, grid))
        # cost of the run itself, accumulated onto the step grid
        seg = _segment_costs(model, phi, run)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        costs.append(np.diff(np.interp(grid, run.times, cum)))
    paths = np.stack(paths, axis=1)
    costs = np.stack(costs, axis=1)
    return lambda n, X: (paths[n + 1], costs[n])


def fourier_modes(dim: int, count: int = 8) -> list[tuple[np.ndarray, str]]:
    """The first ``count`` real Fourier modes (cos and sin pairs) by wavevector size."""
    ks = [np.array(k) for k in itertools.product(range(-4, 5), repeat=dim) if _positive(np.array(k))]
    ks.sort(key=lambda k: (np.dot(k, k), tuple(-np.abs(k))))
    out = []
    for k in ks:
        for kind in ("cos", "sin"):
            out.append((np.asarray(k, dtype=float), kind))
            if len(out) == count:
                return out
    return out


def _positive(k) -> bool:
    nz = np.flatnonzero(k)
    return len(nz) > 0 and k[nz[0]] > 0


def _mode(k, kind, x):
    arg = 2 * np.pi * (x @ k)
    if kind == "cos":
        return np.cos(arg), -2 * np.pi * np.sin(arg)[:, None] * k
    return np.sin(arg), 2 * np.pi * np.cos(arg)[:, None] * k


def ce_residual(model, phi, evo: CloudEvolution, modes=None) -> dict:
    """Weak continuity residual at the stored probe steps (t, t+h).

    Midpoint form: |(<g, mu_{t+h}> - <g, mu_t>)/h - <grad g . H_p(x, p#(x)), mu_{t+h/2}>|,
    with field and grad g at the step midpoint of every particle. One-sided
    form: the same difference quotient against <grad g . H_p(x, p#(x)), mu_t>.
    """
    modes = fourier_modes(evo.snapshots.shape[2]) if modes is None else modes
    w = evo.weights
    h = evo.h
    table, table_plus = {}, {}
    for t, (Xa, Xb) in sorted(evo.steps.items()):
        mid = Xa + 0.5 * (Xb - Xa)
        V = model.H_p(mid, select_batch(model, phi, mid, reduced=False)[0])
        Va = model.H_p(Xa, select_batch(model, phi, Xa, reduced=False)[0])
        row, row_plus = [], []
        for k, kind in modes:
            ga, dga = _mode(k, kind, Xa)
            gb, _ = _mode(k, kind, Xb)
            _, dg = _mode(k, kind, mid)
            lhs = float(w @ (gb - ga)) / h
            row.append(abs(lhs - float(w @ np.sum(dg * V, axis=1))))
            row_plus.append(abs(lhs - float(w @ np.sum(dga * Va, axis=1))))
        table[t], table_plus[t] = row, row_plus
    times = list(table)
    return {"times": times, "residuals": [table[t] for t in times],
            "one_sided": [table_plus[t] for t in times],
            "modes": [(k.tolist(), kind) for k, kind in modes],
            "max_residual": max((max(r) for r in table.values()), default=0.0),
            "max_one_sided": max((max(r) for r in table_plus.values()), default=0.0)}


def aggregate_edi(evo: CloudEvolution) -> dict:
    """<phi, mu_T> - <phi, mu_0> against the integrated cost of L + H(x, p#), per unit time."""
    lhs = float(evo.weights @ (evo.phi_end - evo.phi_start))
    rhs = float(evo.weights @ evo.cost)
    return {"phi_change": lhs, "cost": rhs, "residual": abs(lhs - rhs) / evo.T}


def energy_averages(model, phi, evo: CloudEvolution, *, lam: float | None = None, slack: float = 0.1) -> dict:
    """E(t) = <H(x, p#(x)), mu_t>; checks E(t2) - E(t1) <= lambda (t2 - t1) on snapshot pairs."""
    lam = lambda_hat(model, phi) if lam is None else lam
    E = np.array([float(evo.weights @ select_batch(model, phi, X, reduced=False)[1]) for X in evo.snapshots])
    dt = evo.times[None, :] - evo.times[:, None]
    excess = np.where(dt > 0, E[None, :] - E[:, None] - lam * dt, -np.inf)
    worst = float(excess.max()) if excess.size else 0.0
    return {"energy": E.tolist(), "lambda_hat": lam, "max_excess": worst, "bounded": worst <= slack}


def singular_nodes(phi, dim: int, n: int = 1024, tol: float = 1e-7) -> np.ndarray:
    """Grid nodes where the superdifferential hull is not a point."""
    g = np.arange(n) / n
    pts = np.stack(np.meshgrid(*([g] * dim), indexing="ij"), -1).reshape(-1, dim)
    vals, _ = phi.candidates(pts)
    multi = phi.active_mask(vals).sum(axis=1) > 1
    keep = [i for i in np.flatnonzero(multi) if is_singular(phi, pts[i], tol)[0]]
    return pts[keep]


def _set_distance(X, S, chunk: int = 4096):
    out = np.empty(len(X))
    for a in range(0, len(X), chunk):
        diff = wrap_displacement(X[a:a + chunk, None, :] - S[None, :, :])
        out[a:a + chunk] = np.sqrt((diff ** 2).sum(-1)).min(axis=1)
    return out


def mass_monotonicity(phi, evo: CloudEvolution, delta: float, *, speed: float, nodes=None,
                      grid: int = 1024) -> dict:
    """Mass of the delta-neighbourhood of Sing at each snapshot and its decreases.

    A decrease between consecutive snapshots is flagged only when it exceeds
    the mass sitting within speed * dt of the neighbourhood boundary.
    """
    d = evo.snapshots.shape[2]
    S = singular_nodes(phi, d, grid) if nodes is None else np.atleast_2d(nodes)
    if len(S) == 0:
        return {"delta": delta, "mass": [0.0] * len(evo.times), "violations": 0, "empty_set": True}
    mass, allow = [], []
    for k, X in enumerate(evo.snapshots):
        dist = _set_distance(reduce(X), S)
        band = speed * (evo.times[min(k + 1, len(evo.times) - 1)] - evo.times[k]) + 1.0 / grid
        mass.append(float(evo.weights @ (dist < delta)))
        allow.append(float(evo.weights @ (np.abs(dist - delta) <= band)))
    mass = np.array(mass)
    drops = mass[:-1] - mass[1:]
    bad = drops > np.array(allow[:-1]) + 1e-12
    return {"delta": delta, "mass": mass.tolist(), "max_drop": float(max(drops.max(), 0.0)) if len(drops) else 0.0,
            "violations": int(bad.sum()), "empty_set": False}


__all__ = ["ParticleCloud", "CloudEvolution", "evolve_cloud", "ce_residual", "aggregate_edi", "energy_averages",
           "mass_monotonicity", "singular_nodes", "fourier_modes"]

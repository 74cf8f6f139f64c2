"""Singular set, cut locus, cut time by calibration and propagation diagnostics."""

from __future__ import annotations

import logging
import weakref
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InsufficientSamples, NotWeakKam, PreconditionFailed
from .geometry import as_coords, reduce
from .hamiltonian import integrate
from .laxoleinik import fixed_point_residual
from .semiconcave import superdifferential

logger = logging.getLogger(__name__)

SING_TOL = 1e-7
CALIBRATION_TOL = 1e-5


@dataclass(frozen=True)
class SingularityReport:
    singular: bool
    hull_diameter: float
    cut_time: float
    in_cut: bool

    def to_dict(self) -> dict:
        return asdict(self)


def is_singular(phi, x, tol: float = SING_TOL) -> tuple[bool, float]:
    diam = superdifferential(phi, x).diameter
    return diam > tol, diam


_WK_CACHE: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def critical_value_estimate(model, phi, samples: int = 64) -> float:
    """Median of H(x, D phi(x)) over differentiable lattice points."""
    xs = (np.arange(samples) + 0.37) / samples
    xs = np.stack([xs] * model.dim, axis=1) if model.dim > 1 else xs[:, None]
    vals, grads = phi.candidates(xs)
    smooth = phi.active_mask(vals).sum(axis=1) == 1
    g = phi.active_gradient(xs)
    return float(np.median(model.H(xs[smooth], g[smooth])))


def check_weak_kam(model, phi, c: float | None = None, *, t: float = 0.05, tol: float = 5e-3,
                   samples: int = 32) -> float:
    """Raise NotWeakKam unless sup |T-_t phi + c t - phi| <= tol; returns c."""
    cache = _WK_CACHE.setdefault(phi, {})
    key = (id(model), c, t, tol)
    if key in cache:
        ok, c_used, res = cache[key]
    else:
        c_used = critical_value_estimate(model, phi) if c is None else float(c)
        g = (np.arange(samples) + 0.5) / samples
        xs = np.stack(np.meshgrid(*([g] * model.dim), indexing="ij"), -1).reshape(-1, model.dim)
        if len(xs) > 64:
            xs = xs[np.linspace(0, len(xs) - 1, 64).astype(int)]
        res = fixed_point_residual(model, phi, t, c_used, xs)
        ok = res <= tol
        cache[key] = (ok, c_used, res)
    if not ok:
        raise NotWeakKam(f"fixed-point residual {res:.3g} exceeds {tol}")
    return c_used


def cut_time_calibration(model, phi, x, t_max: float, steps: int, *, c: float | None = None,
                         tol: float = CALIBRATION_TOL, check: bool = True) -> float:
    """First time the forward orbit of (x, D phi(x)) stops calibrating phi (t_max if never)."""
    x = reduce(as_coords(x, model.dim))
    sing, _ = is_singular(phi, x)
    if sing:
        return 0.0
    c = check_weak_kam(model, phi, c) if check else (critical_value_estimate(model, phi) if c is None else c)
    p0 = phi.active_gradient(x)
    times = np.linspace(0.0, t_max, steps + 1)
    path, acts = _running_action(model, x, p0, t_max, steps)
    vals = phi.value(path, reduced=True)
    defect = np.abs(vals - vals[0] - (acts + c * times))
    bad = np.flatnonzero(defect > tol)
    return float(times[bad[0]]) if len(bad) else float(t_max)


def _running_action(model, x, p0, t, steps):
    """Orbit positions and cumulative action at every step."""
    out = np.zeros(steps + 1)
    path = np.empty((steps + 1, len(x)))
    path[0] = x
    xx, pp = x[None].copy(), p0[None].copy()
    dt = t / steps
    for k in range(steps):
        fb = integrate(model, xx, pp, dt, 1, action=True)
        out[k + 1] = out[k] + fb.action[0]
        xx, pp = fb.x, fb.p
        path[k + 1] = xx[0]
    return path, out


def singularity_report(model, phi, x, t_max: float = 0.5, steps: int = 500, **kw) -> SingularityReport:
    sing, diam = is_singular(phi, x)
    ct = cut_time_calibration(model, phi, x, t_max, steps, **kw)
    return SingularityReport(sing, diam, ct, ct <= t_max / steps)


def propagation_report(model, phi, run, *, window: float = 0.1, t_max: float = 0.5, steps: int = 500,
                       stride: int = 1, c: float | None = None) -> dict:
    """Membership of run samples in Sing and Cut, and window densities of Sing."""
    step = t_max / steps
    pts = run.curve.points
    if cut_time_calibration(model, phi, pts[0], t_max, steps, c=c) > step:
        raise PreconditionFailed("run does not start in the cut locus")
    idx = np.arange(0, len(pts), stride)
    sing = np.array([is_singular(phi, pts[i])[0] for i in idx])
    cut = np.array([True if s else cut_time_calibration(model, phi, pts[i], t_max, steps, c=c) <= step
                    for i, s in zip(idx, sing)])
    times = run.times[idx]
    windows = []
    t0 = times[0]
    violations = 0
    no_interval = 0
    while t0 + window <= times[-1] + 1e-12:
        sel = (times >= t0 - 1e-12) & (times < t0 + window - 1e-12)
        frac = float(sing[sel].mean()) if np.any(sel) else 0.0
        run_len = _longest_run(sing[sel])
        windows.append({"t0": float(t0), "sing_fraction": frac, "longest_singular_run": run_len})
        violations += frac == 0.0
        no_interval += run_len < 2
        t0 += window
    return {
        "samples": int(len(idx)),
        "sing_fraction": float(sing.mean()),
        "cut_fraction": float(cut.mean()),
        "sing_subset_of_cut": bool(np.all(cut[sing])),
        "windows": windows,
        "empty_windows": int(violations),
        "windows_without_interval": int(no_interval),
    }


def _longest_run(flags) -> int:
    best = cur = 0
    for f in flags:
        cur = cur + 1 if f else 0
        best = max(best, cur)
    return best


def c11_estimate_check(model, phi, t_list=(0.05, 0.1, 0.2), samples: int = 64, *, radius: float = 0.02,
                       per_point: int = 8, steps_per_unit: int = 1000, seed: int = 0,
                       c: float | None = None) -> dict:
    """sup |p - D phi(x)| t / |y - x| over x with cut time >= t and p in D+phi(y)."""
    rng = np.random.default_rng(seed)
    d = model.dim
    xs = rng.random((samples, d))
    tmax = max(t_list)
    steps = int(np.ceil(tmax * steps_per_unit))
    cuts = np.array([cut_time_calibration(model, phi, x, tmax, steps, c=c) for x in xs])
    sups = {}
    counts = {}
    for t in t_list:
        good = xs[cuts >= t - 1e-12]
        counts[t] = int(len(good))
        if len(good) == 0:
            raise InsufficientSamples(f"no sample point has cut time >= {t}")
        best = 0.0
        for x in good:
            gx = phi.active_gradient(x)
            off = rng.normal(size=(per_point, d))
            off *= (radius * rng.random((per_point, 1))) / np.linalg.norm(off, axis=1, keepdims=True)
            for o in off:
                r = float(np.linalg.norm(o))
                if r == 0:
                    continue
                V = superdifferential(phi, x + o).vertices
                best = max(best, float(np.max(np.linalg.norm(V - gx, axis=1))) * t / r)
        sups[t] = best
    vals = np.array([sups[t] for t in t_list])
    med = float(np.median(vals))
    ratio = float(vals.max() / med) if med > 0 else (0.0 if vals.max() == 0 else np.inf)
    return {"sup_ratio": {str(t): sups[t] for t in t_list}, "qualified": {str(t): counts[t] for t in t_list},
            "max_over_median": ratio, "stable": bool(ratio <= 3.0)}

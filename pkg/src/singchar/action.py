"""Fundamental solutions A_t(x, y) by shooting or by a discrete action minimiser."""

from __future__ import annotations

import logging
import threading
import weakref
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import HorizonExceeded, NonConvergence, SpeedBoundExceeded
from .geometry import as_coords, lift_shifts, nearest_lift, reduce, torus_distance
from .hamiltonian import HamiltonianModel, default_steps, integrate, legendre

logger = logging.getLogger(__name__)

DEFAULT_SPEED_BOUND = 10.0
SHOOT_TOL = 1e-10


@dataclass(frozen=True)
class Curve:
    """Time-sampled path; ``lifted`` is the continuous representative, ``points`` its reduction."""

    times: np.ndarray
    lifted: np.ndarray
    momenta: np.ndarray | None = None
    speed_bound: float = np.inf

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        z = np.asarray(self.lifted, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if len(t) != len(z):
            raise ValueError("times and points must have equal length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.isfinite(self.speed_bound) and len(t) > 1:
            gaps = np.linalg.norm(np.diff(z, axis=0), axis=1)
            if np.any(gaps > self.speed_bound * np.diff(t) * (1 + 1e-9) + 1e-12):
                raise SpeedBoundExceeded("curve violates its speed bound")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "lifted", z)
        if self.momenta is not None:
            object.__setattr__(self, "momenta", np.asarray(self.momenta, dtype=float).reshape(z.shape))

    @property
    def points(self) -> np.ndarray:
        return reduce(self.lifted)

    @property
    def dim(self) -> int:
        return self.lifted.shape[1]

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class ActionResult:
    value: float
    minimizer: Curve
    dyA: np.ndarray
    dxA: np.ndarray
    dtA: float
    method: str = "shooting"


def _verify(model, curve: Curve, dyA, dxA, dtA, tol=1e-6):
    z, P = curve.lifted, curve.momenta
    for idx, sign, val in ((-1, 1.0, dyA), (0, -1.0, dxA)):
        v = model.H_p(z[idx], P[idx])
        p = legendre(model, z[idx], v).p
        if np.max(np.abs(sign * p - val)) > tol:
            raise NonConvergence("endpoint derivative failed the Legendre consistency check")
    if abs(-model.H(z[0], P[0]) - dtA) > tol * max(1.0, abs(dtA)):
        raise NonConvergence("time derivative failed the energy consistency check")


def shoot(model: HamiltonianModel, x, target, t: float, *, p0=None, tol: float = SHOOT_TOL,
          max_iter: int = 40, steps: int | None = None):
    """Batched Newton on p0 so that X_t(x, p0) = target (lifted coordinates).

    Returns ``(p0, flow_batch, converged)``; the flow carries the action.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    x, target = np.broadcast_arrays(x, target)
    steps = default_steps(t) if steps is None else steps
    if p0 is None:
        # straight-line momentum plus the first-order force correction
        p0 = legendre(model, x, (target - x) / t).p
        p0 = p0 + 0.5 * t * model.H_x(x, p0)
    p = np.array(np.broadcast_to(p0, x.shape), dtype=float)
    err = np.full(len(x), np.inf)
    scale = np.ones(len(x))
    fb = None
    for _ in range(max_iter):
        fb = integrate(model, x, p, t, steps, action=True, variational=True)
        F = fb.x - target
        new_err = np.linalg.norm(F, axis=1)
        if np.all(new_err <= tol):
            return p, fb, np.ones(len(x), dtype=bool)
        grew = new_err > err * (1 + 1e-12)
        scale = np.where(grew, 0.5 * scale, np.minimum(1.0, 2 * scale))
        err = np.where(grew, err, new_err)
        try:
            step = np.linalg.solve(fb.jx, F[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(fb.jx.reshape(-1, x.shape[1]), F.reshape(-1), rcond=None)[0].reshape(F.shape)
        p = p - scale[:, None] * step
    fb = integrate(model, x, p, t, steps, action=True, variational=True)
    conv = np.linalg.norm(fb.x - target, axis=1) <= tol
    return p, fb, conv


def candidate_lifts(x, y, reach: float) -> np.ndarray:
    """Lifts of y (relative to reduced x) within ``reach``, shape (K, d), in lexicographic shift order."""
    x = reduce(x)
    base = nearest_lift(x, y)
    lifts = base + lift_shifts(x.shape[-1])
    dist = np.linalg.norm(lifts - x, axis=-1)
    return lifts[dist <= reach + 1e-15]


def fundamental_solution(model: HamiltonianModel, x, y, t: float, method: str = "shooting", *,
                         speed_bound: float = DEFAULT_SPEED_BOUND, segments: int = 64,
                         tol: float = SHOOT_TOL, horizon: float | None = None,
                         keep_path: bool = True) -> ActionResult:
    """A_t(x, y), minimising over the nearby lifts of ``y``."""
    if not t > 0:
        raise ValueError("t must be positive")
    if horizon is not None and t > horizon:
        raise HorizonExceeded(f"t={t} exceeds the measured horizon {horizon}")
    x = reduce(as_coords(x, model.dim))
    y = as_coords(y, model.dim)
    lifts = candidate_lifts(x, y, speed_bound * t)
    if len(lifts) == 0:
        raise SpeedBoundExceeded(f"d(x,y)={torus_distance(x, y):.4g} > lambda t={speed_bound * t:.4g}")
    best = None
    for target in lifts:
        if method == "shooting":
            res = _shooting(model, x, target, t, tol, keep_path)
        elif method == "discrete":
            res = _discrete(model, x, target, t, segments)
        else:
            raise ValueError(f"unknown method {method!r}")
        if best is None or res.value < best.value - 1e-14:
            best = res
    return best


def _shooting(model, x, target, t, tol, keep_path):
    p0, fb, conv = shoot(model, x[None], target[None], t, tol=tol)
    if not conv[0]:
        raise NonConvergence("shooting Newton did not reach the endpoint tolerance")
    steps = default_steps(t)
    path = integrate(model, x[None], p0, t, steps, keep_path=True)
    times = np.linspace(0.0, t, steps + 1)
    curve = Curve(times, path.path_x[:, 0], path.path_p[:, 0])
    dyA, dxA, dtA = fb.p[0].copy(), -p0[0].copy(), float(-model.H(x, p0[0]))
    _verify(model, curve, dyA, dxA, dtA)
    return ActionResult(float(fb.action[0]), curve, dyA, dxA, dtA, "shooting")


def _discrete_action(model, z, dt):
    mid = 0.5 * (z[1:] + z[:-1])
    v = np.diff(z, axis=0) / dt
    lv = legendre(model, mid, v)
    return float(np.sum(lv.L) * dt), mid, lv.p


def _discrete(model, x, target, t, m, max_iter=2000, gtol=1e-11):
    """Midpoint-rule action over m segments, H^1-preconditioned gradient descent."""
    dt = t / m
    s = np.linspace(0.0, 1.0, m + 1)[:, None]
    z = x + s * (target - x)
    # tridiagonal second-difference matrix on interior nodes, scaled to the action Hessian of free motion
    ab = np.zeros((3, m - 1))
    ab[0, 1:] = -1.0 / dt
    ab[1, :] = 2.0 / dt
    ab[2, :-1] = -1.0 / dt
    val, mid, p = _discrete_action(model, z, dt)
    for it in range(max_iter):
        hx = model.H_x(mid, p)
        g = np.zeros_like(z)
        # dS/dz_j: from segment j-1 (right end) and segment j (left end)
        g[1:] += -0.5 * dt * hx + p
        g[:-1] += -0.5 * dt * hx - p
        gi = g[1:-1]
        direction = solve_banded((1, 1), ab, gi)
        slope = float(np.sum(gi * direction))
        if np.sqrt(abs(slope)) <= gtol:
            break
        step = 1.0
        while True:
            trial = z.copy()
            trial[1:-1] -= step * direction
            tval, tmid, tp = _discrete_action(model, trial, dt)
            if tval <= val - 1e-4 * step * slope or step < 1e-12:
                break
            step *= 0.5
        if step < 1e-12:
            break
        z, val, mid, p = trial, tval, tmid, tp
    times = np.linspace(0.0, t, m + 1)
    # dual arc: node momenta averaged from adjacent segments
    mom = np.empty_like(z)
    mom[0], mom[-1] = p[0], p[-1]
    mom[1:-1] = 0.5 * (p[1:] + p[:-1])
    curve = Curve(times, z, mom)
    return ActionResult(val, curve, p[-1].copy(), -p[0].copy(), float(-model.H(mid[0], p[0])), "discrete")


def batch_fundamental(model, xs, ys, t, *, speed_bound=DEFAULT_SPEED_BOUND, tol=SHOOT_TOL):
    """Vectorised A_t over pairs: values (N,), p0 (N, d), p_end (N, d).

    Pairs with no lift in reach get ``inf``. Non-converged shootings raise.
    """
    xs = reduce(np.atleast_2d(np.asarray(xs, dtype=float)))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    xs, ys = np.broadcast_arrays(xs, ys)
    n, d = xs.shape
    base = nearest_lift(xs, ys)
    best = np.full(n, np.inf)
    P0 = np.zeros((n, d))
    PT = np.zeros((n, d))
    reach = speed_bound * t
    for s in lift_shifts(d):
        tgt = base + s
        ok = np.linalg.norm(tgt - xs, axis=1) <= reach + 1e-15
        if not np.any(ok):
            continue
        p0, fb, conv = shoot(model, xs[ok], tgt[ok], t, tol=tol)
        if not np.all(conv):
            raise NonConvergence(f"{np.sum(~conv)} shootings failed at t={t}")
        idx = np.flatnonzero(ok)
        better = fb.action < best[idx] - 1e-14
        j = idx[better]
        best[j] = fb.action[better]
        P0[j] = p0[better]
        PT[j] = fb.p[better]
    return best, P0, PT


_HORIZON_CACHE: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()
_HORIZON_LOCK = threading.Lock()


def _horizon_ok(model, t, lam, nx, nd):
    d = model.dim
    g = np.linspace(0.0, 1.0, nx, endpoint=False)
    xs = np.stack(np.meshgrid(*([g] * d), indexing="ij"), -1).reshape(-1, d)
    r = min(lam * t, 0.5)
    offs = np.linspace(-r, r, nd)
    if d == 1:
        D = offs[:, None]
    else:
        D = np.stack(np.meshgrid(offs, offs, indexing="ij"), -1).reshape(-1, 2)
        D = D[np.linalg.norm(D, axis=1) <= r]
    X = np.repeat(xs, len(D), axis=0)
    Y = X + np.tile(D, (len(xs), 1))
    try:
        p0, fb, conv = shoot(model, X, Y, t, max_iter=12, steps=default_steps(t, 1.0 / 128))
    except (np.linalg.LinAlgError, FloatingPointError):
        return False
    return bool(np.all(conv) and np.all(np.linalg.det(fb.jx) > 0))


def t_max(model: HamiltonianModel, speed_bound: float = DEFAULT_SPEED_BOUND, *,
          t_cap: float = 0.5, bisections: int = 7, nx: int = 8, nd: int = 7) -> float:
    """Measured short-time horizon: largest t (<= t_cap) on which shooting succeeds everywhere."""
    key = (float(speed_bound), t_cap)
    with _HORIZON_LOCK:
        cached = _HORIZON_CACHE.get(model, {})
        if key in cached:
            return cached[key]
    with np.errstate(all="ignore"):
        if _horizon_ok(model, t_cap, speed_bound, nx, nd):
            out = t_cap
        else:
            lo, hi = 0.0, t_cap
            for _ in range(bisections):
                mid = 0.5 * (lo + hi)
                if _horizon_ok(model, mid, speed_bound, nx, nd):
                    lo = mid
                else:
                    hi = mid
            out = lo
    logger.info("measured horizon for %s: %.4g", model.name, out)
    with _HORIZON_LOCK:
        _HORIZON_CACHE.setdefault(model, {})[key] = out
    return out


def within_horizon(model: HamiltonianModel, t: float, speed_bound: float = DEFAULT_SPEED_BOUND,
                   t_cap: float = 0.5) -> bool:
    """Whether t <= t_cap and shooting succeeds everywhere at time t; reuses a cached horizon."""
    if t > t_cap:
        return False
    with _HORIZON_LOCK:
        cached = _HORIZON_CACHE.get(model, {}).get((float(speed_bound), t_cap))
    if cached is not None:
        return t <= cached
    with np.errstate(all="ignore"):
        return _horizon_ok(model, t, speed_bound, 8, 7)


def action_regularity_check(model, x, t: float, speed_bound: float = 1.0, samples: int = 16, *,
                            fd_step: float = 1e-4, horizon: float | None = None, seed: int = 0) -> dict:
    """Finite-difference Hessians of y -> A_t(x, y) on B(x, lambda t), eigenvalues scaled by t."""
    if horizon is None:
        horizon = t_max(model, max(speed_bound, 1.0))
    if t > horizon:
        raise HorizonExceeded(f"t={t} exceeds the measured horizon {horizon}")
    x = reduce(as_coords(x, model.dim))
    d = model.dim
    rng = np.random.default_rng(seed)
    r = 0.8 * speed_bound * t
    dirs = rng.normal(size=(samples, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ys = x + dirs * r * rng.random((samples, 1)) ** (1.0 / d)
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = fd_step
        _, _, pp = batch_fundamental(model, np.broadcast_to(x, ys.shape), ys + e, t)
        _, _, pm = batch_fundamental(model, np.broadcast_to(x, ys.shape), ys - e, t)
        cols.append((pp - pm) / (2 * fd_step))
    Hs = np.stack(cols, axis=-1)
    Hs = 0.5 * (Hs + np.swapaxes(Hs, -1, -2))
    ev = np.linalg.eigvalsh(Hs)
    eig_min, eig_max = float(ev.min()), float(ev.max())
    return {"t": t, "min_eig_times_t": eig_min * t, "max_eig_times_t": eig_max * t,
            "samples": samples, "horizon": horizon}

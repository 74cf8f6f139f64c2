"""Lax-Oleinik operators, weak KAM solutions, cut-time commutator and sharp operators.

Two evaluation paths are used.

* Pointwise: T+_t f(x) = max_{p0} f(X_t(x, p0)) - S_t(x, p0), parametrising
  the endpoint y by the initial momentum of the Hamiltonian flow (valid in the
  short-time regime, where p0 -> y is a diffeomorphism and S_t = A_t). T-_t
  uses the backward flow from x with terminal momentum p. A coarse scan keeps
  up to three local optima, each refined by a shrinking grid zoom. The
  optimal momentum is the gradient of the output (envelope theorem).
* On grids: node-to-node min-plus with a precomputed band of A_t values,
  followed by one parabolic refinement of the optimal offset per axis.
  Without the refinement (``refine=False``) the operator is exactly monotone.
"""

from __future__ import annotations

import csv
import logging
import threading
import weakref
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .action import DEFAULT_SPEED_BOUND, batch_fundamental, t_max, within_horizon
from .errors import HorizonExceeded, NonConvergence
from .geometry import Grid, as_coords, reduce
from .hamiltonian import default_steps, integrate, legendre
from .semiconcave import EPS_ACT, MinSmoothFn, vertices_from

logger = logging.getLogger(__name__)

ZERO_TOL = 1e-6
ENGINE_DT = 1.0 / 256


# ---------------------------------------------------------------------------
# grid fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.size:
            raise ValueError("values do not match the grid size")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def sup_distance(self, other) -> float:
        return float(np.max(np.abs(self.values - other.values)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"index_{i}" for i in range(self.grid.dim)] + ["value"])
            for idx, val in zip(self.grid.indices, self.values):
                w.writerow([*map(int, idx), f"{val:.17g}"])

    @classmethod
    def from_csv(cls, path, grid: Grid) -> GridField:
        vals = np.empty(grid.size)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        for row in rows:
            idx = [int(v) for v in row[:-1]]
            vals[grid.flat_index(idx)] = float(row[-1])
        return cls(grid, vals)


class PeriodicInterpolant:
    """Periodic cubic spline of a grid field (callable on (N, d) points)."""

    def __init__(self, field: GridField):
        self.field = field
        self.dim = field.grid.dim
        self._coef = ndimage.spline_filter(field.array, order=3, mode="grid-wrap")
        self._res = np.array(field.grid.resolution, dtype=float)

    def __call__(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        coords = (reduce(xs) * self._res).T
        return ndimage.map_coordinates(self._coef, coords, order=3, mode="grid-wrap", prefilter=False)

    value = __call__


def _fn_values(f, xs):
    if isinstance(f, MinSmoothFn) or hasattr(f, "candidates"):
        return np.asarray(f.value(xs)).reshape(-1)
    return np.asarray(f(xs)).reshape(-1)


def _lipschitz(f) -> float:
    lip = getattr(f, "lipschitz_constant", None)
    if lip is None and isinstance(f, PeriodicInterpolant):
        g = f.field
        lip = float(np.max(np.abs(np.diff(np.append(g.values, g.values[:1])))) * max(g.grid.resolution)) \
            if g.grid.dim == 1 else float(np.max(np.abs(np.gradient(g.array))) * max(g.grid.resolution))
    if lip is None or not np.isfinite(lip):
        lip = 10.0
    return float(lip)


# ---------------------------------------------------------------------------
# pointwise engine
# ---------------------------------------------------------------------------


def momentum_radius(model, f, t: float) -> float:
    lip = _lipschitz(f)
    hx = _hx_bound(model)
    return 1.25 * lip + 0.5 + t * hx


def _hx_bound(model) -> float:
    pot = model.spec.get("potential") if model.spec else None
    if pot is not None:
        from .hamiltonian import TrigPotential
        return TrigPotential.from_spec(pot, model.dim).grad_bound()
    xs = np.random.default_rng(0).random((256, model.dim))
    return float(np.max(np.linalg.norm(model.H_x(xs, np.zeros_like(xs)), axis=1)))


def _local_maxima(J: np.ndarray, dim: int) -> np.ndarray:
    """Boolean mask of local maxima of J (N, S) on the scan lattice."""
    if dim == 1:
        left = np.concatenate([np.full((len(J), 1), -np.inf), J[:, :-1]], axis=1)
        right = np.concatenate([J[:, 1:], np.full((len(J), 1), -np.inf)], axis=1)
        return (J >= left) & (J >= right)
    n = int(round(np.sqrt(J.shape[1])))
    G = J.reshape(len(J), n, n)
    mx = ndimage.maximum_filter(G, size=(1, 3, 3), mode="constant", cval=-np.inf)
    return (G >= mx).reshape(len(J), -1)


@dataclass
class SearchResult:
    """Up to K local optima per point, best first (invalid slots are +-inf)."""

    values: np.ndarray   # (N, K)
    momenta: np.ndarray  # (N, K, d)
    endpoints: np.ndarray  # (N, K, d) lifted optimal y


def lo_search(model, f, xs, t: float, direction: str, *, radius: float | None = None,
              steps: int | None = None, n_keep: int = 3, scan: int | None = None,
              tol: float = 1e-11) -> SearchResult:
    """Pointwise Lax-Oleinik values and local optima at points ``xs``.

    ``direction='pos'``: sup_y f(y) - A_t(x, y); ``'neg'``: inf_y f(y) + A_t(y, x).
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n, d = xs.shape
    if t == 0:
        vals = _fn_values(f, xs)[:, None]
        grads = _gradient_of(f, xs)[:, None, :]
        return SearchResult(vals, grads, xs[:, None, :].copy())
    sign = 1.0 if direction == "pos" else -1.0
    if direction not in ("pos", "neg"):
        raise ValueError("direction must be 'pos' or 'neg'")
    R = momentum_radius(model, f, t) if radius is None else radius
    steps = default_steps(t, ENGINE_DT) if steps is None else steps
    flow_t = t if direction == "pos" else -t

    def objective(X, P):
        """X (M, d) base points, P (M, d) momenta -> (score to maximise, value, endpoint)."""
        fb = integrate(model, X, P, flow_t, steps, action=True)
        val = _fn_values(f, fb.x) - fb.action
        return sign * val, val, fb.x

    if scan is None:
        scan = 65 if d == 1 else 33
    g = np.linspace(-R, R, scan)
    if d == 1:
        G = g[:, None]
    else:
        G = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    S = len(G)
    score, _, _ = objective(np.repeat(xs, S, axis=0), np.tile(G, (n, 1)))
    score = score.reshape(n, S)
    lm = _local_maxima(score, d)
    masked = np.where(lm, score, -np.inf)
    order = np.argsort(-masked, axis=1, kind="stable")[:, :n_keep]
    valid = np.take_along_axis(masked, order, axis=1) > -np.inf
    C = G[order]  # (n, K, d)
    K = C.shape[1]
    if d == 1:
        Z = np.linspace(-1.0, 1.0, 9)[:, None]
        shrink = 0.25
    else:
        z1 = np.linspace(-1.0, 1.0, 7)
        Z = np.stack(np.meshgrid(z1, z1, indexing="ij"), -1).reshape(-1, 2)
        shrink = 1.0 / 3.0
    nz = len(Z)
    base = np.repeat(xs[:, None, :], K, axis=1)
    # zoom only the slots that hold a scan optimum
    live = np.flatnonzero(valid.reshape(-1))
    Cf = C.reshape(-1, d).copy()
    Bf = base.reshape(-1, d)
    rr = g[1] - g[0]
    while rr > tol * max(1.0, R):
        P = Cf[live, None, :] + rr * Z[None]
        sc, _, _ = objective(np.repeat(Bf[live], nz, axis=0), P.reshape(-1, d))
        best = np.argmax(sc.reshape(len(live), nz), axis=1)
        Cf[live] = P[np.arange(len(live)), best]
        rr *= shrink
    C = Cf.reshape(n, K, d)
    sc = np.full(n * K, -np.inf)
    val = np.full(n * K, np.nan)
    Y = np.zeros((n * K, d))
    sc[live], val[live], Y[live] = objective(Bf[live], Cf[live])
    sc = sc.reshape(n, K)
    val = val.reshape(n, K)
    Y = Y.reshape(n, K, d)
    # merge optima that converged to the same momentum
    for k in range(1, K):
        for j in range(k):
            same = np.linalg.norm(C[:, k] - C[:, j], axis=1) < 1e-6
            sc[:, k] = np.where(same & np.isfinite(sc[:, j]), -np.inf, sc[:, k])
    order = np.argsort(-sc, axis=1, kind="stable")
    sc = np.take_along_axis(sc, order, axis=1)
    val = np.where(np.isfinite(sc), np.take_along_axis(val, order, axis=1), -sign * np.inf)
    C = np.take_along_axis(C, order[:, :, None], axis=1)
    Y = np.take_along_axis(Y, order[:, :, None], axis=1)
    return SearchResult(val, C, Y)


def _gradient_of(f, xs):
    if hasattr(f, "active_gradient"):
        return np.asarray(f.active_gradient(xs)).reshape(xs.shape)
    h = 1e-6
    out = np.zeros_like(xs)
    for k in range(xs.shape[1]):
        e = np.zeros(xs.shape[1])
        e[k] = h
        out[:, k] = (_fn_values(f, xs + e) - _fn_values(f, xs - e)) / (2 * h)
    return out


class LaxOleinikFn:
    """T+-_t f as a min/max of smooth local kernels, with the MinSmoothFn interface.

    Negative direction gives a semiconcave (``sense='min'``) function, the
    positive direction a semiconvex one (``sense='max'``). Candidate
    "gradients" are the optimal momenta of the local optima, listed by rank
    rather than by a fixed branch index.
    """

    ranked_candidates = True

    def __init__(self, model, f, t: float, direction: str, *, shift: float = 0.0,
                 radius: float | None = None, steps: int | None = None, eps_act: float = EPS_ACT):
        self.model = model
        self.f = f
        self.t = float(t)
        self.direction = direction
        self.sense = "min" if direction == "neg" else "max"
        self.dim = model.dim
        self.shift = float(shift)
        self.eps_act = eps_act
        self.radius = radius
        self.steps = steps
        self.lipschitz_constant = momentum_radius(model, f, t)

    @property
    def semiconcavity_constant(self) -> float | None:
        """sup D^2 A_t for T-_t f (a min of x -> f(y) + A_t(y, x)); None for the semiconvex T+."""
        if self.direction != "neg":
            return None
        return _action_hessian_range(self.model, self.t)[1]

    def search(self, xs) -> SearchResult:
        xs = np.atleast_2d(as_coords(xs, self.dim))
        return lo_search(self.model, self.f, xs, self.t, self.direction,
                         radius=self.radius, steps=self.steps)

    def candidates(self, xs, *, reduced: bool = True):
        xs = np.atleast_2d(as_coords(xs, self.dim)).reshape(-1, self.dim)
        res = self.search(reduce(xs) if reduced else xs)
        return res.values + self.shift, res.momenta

    def active_mask(self, vals):
        best = vals.min(axis=1) if self.sense == "min" else vals.max(axis=1)
        gap = vals - best[:, None] if self.sense == "min" else best[:, None] - vals
        return gap <= self.eps_act

    def value(self, xs, *, reduced: bool = True):
        single = np.ndim(xs) <= 1
        vals, _ = self.candidates(xs, reduced=reduced)
        out = vals[:, 0]
        return float(out[0]) if single else out

    __call__ = value

    def active_gradient(self, xs, *, reduced: bool = True):
        single = np.ndim(xs) <= 1
        _, grads = self.candidates(xs, reduced=reduced)
        g = grads[:, 0]
        return g[0] if single else g


# ---------------------------------------------------------------------------
# grid operators
# ---------------------------------------------------------------------------


def default_speed_bound(model, lipschitz: float | None = None) -> float:
    """Lipschitz bound + 1; for built-in models the bound on calibrated speeds."""
    if lipschitz is not None:
        return float(lipschitz) + 1.0
    pot = model.spec.get("potential") if model.spec else None
    if pot is None:
        return DEFAULT_SPEED_BOUND
    from .hamiltonian import TrigPotential
    B = TrigPotential.from_spec(pot, model.dim).bound()
    # speed of an orbit whose kinetic energy reaches the oscillation 2B of V
    e = np.zeros(model.dim)
    e[0] = 1.0
    x0 = np.zeros((1, model.dim))
    kin = lambda r: float((model.H(x0, r * e[None]) - model.H(x0, 0 * e[None]))[0])
    lo, hi = 0.0, 1.0
    while kin(hi) < 2 * B:
        hi *= 2
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if kin(mid) < 2 * B else (lo, mid)
    return float(np.linalg.norm(model.H_p(x0, hi * e[None]))) + 1.0


def band_offsets(grid: Grid, reach: float) -> np.ndarray:
    """Integer offsets o with |o * spacing| <= reach, shape (K, d)."""
    rng = [np.arange(-int(np.floor(reach * n + 1e-12)), int(np.floor(reach * n + 1e-12)) + 1)
           for n in grid.resolution]
    O = np.stack(np.meshgrid(*rng, indexing="ij"), -1).reshape(-1, grid.dim)
    keep = np.linalg.norm(O * grid.spacing, axis=1) <= reach + 1e-12
    return O[keep]


_BAND_CACHE: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()
_BAND_LOCK = threading.Lock()


def action_band(model, grid: Grid, t: float, speed_bound: float, direction: str):
    """Offsets O (K, d) and A (N, K): neg A_t(x_i + o, x_i); pos A_t(x_i, x_i + o)."""
    key = (grid.resolution, float(t), float(speed_bound), direction)
    with _BAND_LOCK:
        hit = _BAND_CACHE.get(model, {}).get(key)
    if hit is not None:
        return hit
    O = band_offsets(grid, speed_bound * t)
    X = np.repeat(grid.nodes, len(O), axis=0)
    Y = X + np.tile(O * grid.spacing, (grid.size, 1))
    if direction == "neg":
        A, _, _ = _pair_actions(model, Y, X, t, speed_bound)
    else:
        A, _, _ = _pair_actions(model, X, Y, t, speed_bound)
    out = (O, A.reshape(grid.size, len(O)))
    with _BAND_LOCK:
        _BAND_CACHE.setdefault(model, {})[key] = out
    return out


def _pair_actions(model, X, Y, t, speed_bound, chunk=20000):
    """A_t for lifted pairs (no lift minimisation: short-time regime, Y already the nearby lift)."""
    from .action import shoot
    vals = np.empty(len(X))
    for s in range(0, len(X), chunk):
        sl = slice(s, s + chunk)
        p0, fb, conv = shoot(model, X[sl], Y[sl], t)
        if not np.all(conv):
            raise NonConvergence(f"band shooting failed for {np.sum(~conv)} pairs at t={t}")
        vals[sl] = fb.action
    return vals, None, None


def _band_apply(u: np.ndarray, grid: Grid, O: np.ndarray, A: np.ndarray, direction: str,
                refine: bool = True) -> np.ndarray:
    """Node min-plus (max-minus for 'pos'), then one parabolic refinement per axis."""
    idx = grid.indices
    nbr = grid.flat_index(idx[:, None, :] + O[None, :, :])
    sgn = 1.0 if direction == "neg" else -1.0
    g = u[nbr] + sgn * A if direction == "neg" else -(u[nbr] - A)
    j = np.argmin(g, axis=1)
    rows = np.arange(len(g))
    best = g[rows, j]
    if refine:
        table, k = _offset_table(O)
        corr = np.zeros(len(g))
        for ax in range(grid.dim):
            e = np.zeros(grid.dim, dtype=int)
            e[ax] = 1
            lo = table[tuple((O[j] - e + k).T)]
            hi = table[tuple((O[j] + e + k).T)]
            ok = (lo >= 0) & (hi >= 0)
            gl = np.where(ok, g[rows, np.where(ok, lo, 0)], 0.0)
            gh = np.where(ok, g[rows, np.where(ok, hi, 0)], 0.0)
            curv = gl - 2 * best + gh
            ok &= curv > 0
            corr += np.where(ok, (gh - gl) ** 2 / (8 * np.where(ok, curv, 1.0)), 0.0)
        best = best - corr
    return sgn * best


def _offset_table(O: np.ndarray):
    k = int(np.max(np.abs(O))) + 1
    table = -np.ones((2 * k + 1,) * O.shape[1], dtype=int)
    table[tuple((O + k).T)] = np.arange(len(O))
    return table, k


def _check_horizon(model, t, speed_bound, horizon):
    if horizon is None:
        if within_horizon(model, t, speed_bound):
            return t
        horizon = t_max(model, speed_bound)
    h = horizon
    if t > h:
        raise HorizonExceeded(f"t={t} exceeds the measured horizon {h:.4g}")
    return h


_CONCAVITY_CACHE: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def _action_hessian_range(model, t: float) -> tuple[float, float]:
    """(min, max) over sampled (x, y) of the eigenvalues of D_y^2 A_t(x, y)."""
    cache = _CONCAVITY_CACHE.setdefault(model, {})
    if t in cache:
        return cache[t]
    from .action import action_regularity_check
    lo, hi = np.inf, -np.inf
    for x in np.linspace(0, 1, 8, endpoint=False):
        xx = np.full(model.dim, x)
        rep = action_regularity_check(model, xx, t, 1.0, samples=4, horizon=np.inf)
        lo = min(lo, rep["min_eig_times_t"] / t)
        hi = max(hi, rep["max_eig_times_t"] / t)
    cache[t] = (lo, hi)
    return lo, hi


def _action_convexity(model, t: float) -> float:
    """min over sampled (x, y) of the smallest eigenvalue of D_y^2 A_t(x, y)."""
    return _action_hessian_range(model, t)[0]


def _concavity_guard(model, f, t: float) -> None:
    """HorizonExceeded unless y -> f(y) - A_t(x, y) is strictly concave (C_f < min eig D^2 A_t)."""
    C = getattr(f, "semiconcavity_constant", None) or 0.0
    if C > 0 and C >= _action_convexity(model, t):
        raise HorizonExceeded(
            f"inner maximisation not strictly concave: C={C:.4g} >= {_action_convexity(model, t):.4g}")


def lax_oleinik(model, u, t: float, direction: str, *, grid: Grid | None = None,
                speed_bound: float | None = None, horizon: float | None = None,
                check_concavity: bool = True, refine: bool = True):
    """Apply T-_t (``'neg'``) or T+_t (``'pos'``) to a grid field or a MinSmoothFn.

    Returns ``(GridField, wrapper)``; the wrapper evaluates the operator at
    arbitrary points with exact superdifferentials. ``refine=False`` keeps
    the grid path a pure node min-plus (exactly monotone).
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if direction not in ("neg", "pos"):
        raise ValueError("direction must be 'neg' or 'pos'")
    if isinstance(u, GridField):
        grid = u.grid
        lam = speed_bound or default_speed_bound(model)
        _check_horizon(model, t, lam, horizon)
        O, A = action_band(model, grid, t, lam, direction)
        vals = _band_apply(u.values, grid, O, A, direction, refine=refine)
        wrapper = LaxOleinikFn(model, PeriodicInterpolant(u), t, direction)
        return GridField(grid, vals), wrapper
    if grid is None:
        grid = Grid.uniform(256, model.dim)
    lam = speed_bound or default_speed_bound(model, getattr(u, "lipschitz_constant", None))
    _check_horizon(model, t, lam, horizon)
    if direction == "pos" and check_concavity:
        _concavity_guard(model, u, t)
    wrapper = LaxOleinikFn(model, u, t, direction)
    return GridField(grid, wrapper.value(grid.nodes)), wrapper


# ---------------------------------------------------------------------------
# weak KAM solutions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeakKamResult:
    u: GridField
    c: float
    residual: float
    iterations: int
    h: float
    speed_bound: float

    def wrapper(self, model) -> LaxOleinikFn:
        """T-_h u (shifted by c h), a continuous representative of the solution."""
        return LaxOleinikFn(model, PeriodicInterpolant(self.u), self.h, "neg", shift=self.c * self.h)


def weak_kam_solve(model, grid: Grid, h: float, tol: float = 1e-9, max_iter: int = 5000, *,
                   speed_bound: float | None = None, horizon: float | None = None,
                   averaging_steps: int = 40, x_ref_index: int = 0) -> WeakKamResult:
    """Relative value iteration u <- T-_h u + c h anchored at the origin node."""
    lam = speed_bound or default_speed_bound(model)
    _check_horizon(model, h, lam, horizon)
    O, A = action_band(model, grid, h, lam, "neg")
    v = np.zeros(grid.size)
    for _ in range(averaging_steps):
        v = _band_apply(v, grid, O, A, "neg")
    c = -v[x_ref_index] / (averaging_steps * h)
    logger.info("critical value estimate from averaging: %.6f", c)
    u = v - v[x_ref_index]
    for it in range(1, max_iter + 1):
        w = _band_apply(u, grid, O, A, "neg")
        c = (u[x_ref_index] - w[x_ref_index]) / h
        w = w + c * h
        change = float(np.max(np.abs(w - u)))
        u = w
        if change <= tol:
            break
    else:
        raise NonConvergence(f"weak KAM iteration did not reach tol={tol} in {max_iter} iterations")
    res = float(np.max(np.abs(_band_apply(u, grid, O, A, "neg") + c * h - u)))
    return WeakKamResult(GridField(grid, u), float(c), res, averaging_steps + it, h, lam)


def hj_residual(model, wk: WeakKamResult, *, diameter_tol: float = 1e-7):
    """|H(x, Du(x)) - c| at grid nodes where the output is differentiable."""
    W = wk.wrapper(model)
    vals, grads = W.candidates(wk.u.grid.nodes)
    mask = W.active_mask(vals)
    res = np.full(len(vals), np.nan)
    diam = np.zeros(len(vals))
    for i in range(len(vals)):
        V, _ = vertices_from(vals[i], grads[i], mask[i])
        if len(V) > 1:
            diam[i] = float(np.max(np.linalg.norm(V[:, None] - V[None], axis=-1)))
    smooth = diam < diameter_tol
    x = wk.u.grid.nodes
    res[smooth] = np.abs(model.H(x[smooth], grads[smooth, 0]) - wk.c)
    return res, diam


def fixed_point_residual(model, phi, t: float, c: float, xs) -> float:
    """sup |T-_t phi + c t - phi| at the points xs (pointwise engine)."""
    W = LaxOleinikFn(model, phi, t, "neg")
    return float(np.max(np.abs(W.value(xs) + c * t - _fn_values(phi, xs))))


# ---------------------------------------------------------------------------
# cut time, Arnaud graph, sharp operators
# ---------------------------------------------------------------------------


def commutator(phi, model, x, t: float, *, steps: int | None = None) -> float:
    """(T-_t T+_t phi - T+_t T-_t phi)(x) by nested pointwise engines."""
    x = np.atleast_2d(as_coords(x, model.dim))
    inner_pos = LaxOleinikFn(model, phi, t, "pos", steps=steps)
    inner_neg = LaxOleinikFn(model, phi, t, "neg", steps=steps)
    a = LaxOleinikFn(model, inner_pos, t, "neg", steps=steps).value(x)
    b = LaxOleinikFn(model, inner_neg, t, "pos", steps=steps).value(x)
    return float(a[0] - b[0])


def cut_time_commutator(phi, model, x, t_grid, *, zero_tol: float = ZERO_TOL,
                        steps: int | None = None, return_values: bool = False):
    """Largest grid time before the commutator first becomes nonzero (0 if at once)."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing")
    values = []
    last = 0.0
    for t in t_grid:
        val = commutator(phi, model, x, t, steps=steps)
        values.append(val)
        if abs(val) > zero_tol:
            break
        last = float(t)
    return (last, values) if return_values else last


def arnaud_graph_check(phi, model, t: float, samples: int = 64, *, seed: int = 0,
                       horizon: float | None = None) -> dict:
    """Distance between backward-flowed D+phi and the graph of D T+_t phi."""
    from .semiconcave import superdifferential
    rng = np.random.default_rng(seed)
    xs = rng.random((samples, model.dim))
    if t == 0:
        return {"max_graph_distance": 0.0, "samples": samples, "t": 0.0}
    lam = default_speed_bound(model, getattr(phi, "lipschitz_constant", None))
    _check_horizon(model, t, lam, horizon)
    _concavity_guard(model, phi, t)
    X, P = [], []
    for x in xs:
        for p in superdifferential(phi, x).vertices:
            X.append(x)
            P.append(p)
    X, P = np.array(X), np.array(P)
    fb = integrate(model, X, P, -t, default_steps(t))
    W = LaxOleinikFn(model, phi, t, "pos")
    vals, grads = W.candidates(fb.x)
    mask = W.active_mask(vals)
    dist = np.where(mask, np.linalg.norm(grads - fb.p[:, None, :], axis=2), np.inf).min(axis=1)
    return {"max_graph_distance": float(dist.max()), "samples": samples, "pairs": len(X), "t": t}


def sharp_energy(model, phi, xs) -> np.ndarray:
    """H(x, p#(x)) at points xs."""
    from .selection import select_batch
    _, h, _ = select_batch(model, phi, xs)
    return h


def sharp_hamiltonian_vertices(model, phi, x) -> np.ndarray:
    """H#(x, q) = H(x, q) - H(x, p#(x)) at the vertices q of D+phi(x)."""
    from .selection import minimal_energy_selection
    sel = minimal_energy_selection(model, phi, x)
    x = reduce(as_coords(x, model.dim))
    return model.H(x, sel.vertices) - sel.h_value


def sharp_operator(model, phi, u: GridField, t: float, direction: str, *, segments: int | None = None,
                   speed_bound: float | None = None) -> GridField:
    """Grid T#_t (``'neg'``) or breve-T#_t (``'pos'``) with Lagrangian L + H(x, p#(x)).

    Discrete action over grid-vertex polygons with ``segments`` time steps,
    two-point Gauss quadrature on each segment. By default the time step is
    about four grid spacings, which balances the time-quantisation error near
    singular points against the velocity quantisation of grid polygons.
    """
    grid = u.grid
    if segments is None:
        segments = max(8, int(np.ceil(t / (4 * float(np.max(grid.spacing))))))
    lam = speed_bound or default_speed_bound(model, getattr(phi, "lipschitz_constant", None))
    tau = t / segments
    O = band_offsets(grid, lam * tau)
    nodes = grid.nodes
    src = np.repeat(nodes, len(O), axis=0)
    disp = np.tile(O * grid.spacing, (grid.size, 1))
    v_seg = disp / tau
    cost = np.zeros(len(src))
    # two-point Gauss rule; its nodes avoid the segment ends, so a moving
    # segment never samples the selection energy exactly at a kink node
    for s in (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)):
        xg = src + s * disp
        cost += 0.5 * tau * (legendre(model, xg, v_seg).L + sharp_energy(model, phi, xg))
    cost = cost.reshape(grid.size, len(O))
    nbr = grid.flat_index(grid.indices[:, None, :] + O[None, :, :])
    v = u.values.copy()
    if direction == "neg":
        # v_new(x) = min_y v(y) + cost(y -> x); y = x - o, the step y -> x has displacement o
        back = grid.flat_index(grid.indices[:, None, :] - O[None, :, :])
        cost_in = cost[back, np.arange(len(O))[None, :]]
        for _ in range(segments):
            v = np.min(v[back] + cost_in, axis=1)
    elif direction == "pos":
        for _ in range(segments):
            v = np.max(v[nbr] - cost, axis=1)
    else:
        raise ValueError("direction must be 'neg' or 'pos'")
    return GridField(grid, v)

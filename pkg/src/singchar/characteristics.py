"""Strict singular characteristics: three constructions and their verifiers.

* ``integrate_euler``: forward Euler on the broken field H_p(x, p#(x)). When a
  step would carry the point across a kink (a new piece becomes active), the
  step is cut at the crossing, the point lands on the kink and the rest of the
  step continues with the selection there.
* ``integrate_mollified``: classical characteristics of the soft-min
  regularisations, stiff near kinks, integrated with Radau.
* ``integrate_intrinsic``: on each interval of width w the curve follows the
  Hamiltonian orbit of the maximiser of phi(y) - A_w(x_i, y), which is the
  integral curve of H_p(x, D T+_{tau-t} phi(x)).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .action import Curve
from .errors import HorizonExceeded, HypothesisViolated, NotCauchy
from .geometry import as_coords, reduce
from .hamiltonian import default_steps, integrate, legendre
from .laxoleinik import LaxOleinikFn, _check_horizon, default_speed_bound
from .selection import (SelectionResult, minimal_energy_selection, minimal_energy_selection_td,
                        select_batch, select_from_vertices)
from .semiconcave import MinSmoothFn, directional_derivative, mollify, superdifferential, vertices_from
from .simplex import hull_distance

logger = logging.getLogger(__name__)

__all__ = [
    "CharacteristicRun", "SelectionResult", "minimal_energy_selection", "minimal_energy_selection_td",
    "integrate_euler", "integrate_mollified", "integrate_intrinsic", "edi_residual", "energy_profile",
    "gc_membership", "stability_harness", "sup_distance",
]


@dataclass
class CharacteristicRun:
    curve: Curve
    method: str
    p_sharp: np.ndarray
    h_value: np.ndarray
    step_cost: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.curve.times

    @property
    def lifted(self) -> np.ndarray:
        return self.curve.lifted

    def to_csv(self, path) -> None:
        d = self.curve.dim
        pts = self.curve.points
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i}" for i in range(d)] + [f"p_{i}" for i in range(d)] + ["h_value"])
            for t, x, p, h in zip(self.times, pts, self.p_sharp, self.h_value):
                w.writerow([f"{v:.17g}" for v in (t, *x, *p, h)])


# ---------------------------------------------------------------------------
# Euler with kink landing
# ---------------------------------------------------------------------------


LONG_STEP = 0.05


def _active_gap(phi, vals_new, act_old):
    """min over newly active candidates minus min over previously active ones."""
    old = np.where(act_old, vals_new, np.inf).min(axis=1)
    new = np.where(~act_old, vals_new, np.inf).min(axis=1)
    return new - old


def _old_mask(phi, vals, grads, ref):
    """Candidates at a new point that continue a branch active at the reference point.

    Pieces of a min-of-smooth function keep their index, so this is the reference
    mask itself. Operator-valued functions list optima by rank; there a slot
    continues the reference branch whose momentum is nearest.
    """
    ref_act, ref_grads, ref_valid = ref
    if not getattr(phi, "ranked_candidates", False):
        return ref_act
    dist = np.linalg.norm(grads[:, :, None, :] - ref_grads[:, None, :, :], axis=-1)
    dist = np.where(ref_valid[:, None, :], dist, np.inf)
    nearest = np.argmin(dist, axis=2)
    return np.take_along_axis(ref_act, nearest, axis=1) & np.isfinite(vals)


def _euler_step(model, phi, X, h, max_events=3, scan=16, start=None, keep_end=False):
    """One broken-field step for a batch of lifted points; returns (X_new, cost, n_events).

    ``start`` optionally supplies the candidates (values, gradients) at X; with
    ``keep_end`` the candidates at X_new are returned as a fourth item so the
    next step can reuse them (candidate evaluation dominates for operator-valued phi).
    """
    n, d = X.shape
    remaining = np.full(n, h)
    cost = np.zeros(n)
    events = np.zeros(n, dtype=int)
    cur = X.copy()
    live = np.ones(n, dtype=bool)
    if start is None:
        cand_v, cand_g = phi.candidates(X, reduced=False)
    else:
        cand_v, cand_g = (np.array(a, copy=True) for a in start)
    for k in range(max_events + 1):
        idx = np.flatnonzero(live)
        if len(idx) == 0:
            break
        xr = cur[idx]
        vals, grads = cand_v[idx], cand_g[idx]
        P, Hs, _ = select_batch(model, phi, xr, reduced=False, vals=vals, grads=grads)
        V = model.H_p(xr, P)
        act = phi.active_mask(vals)
        ref = (act, grads, np.isfinite(vals))
        rem = remaining[idx]
        trial = xr + rem[:, None] * V
        tv, tg = phi.candidates(trial, reduced=False)
        new_active = np.any(phi.active_mask(tv) & ~_old_mask(phi, tv, tg, ref), axis=1)
        # long steps can cross a kink and come back to the same pieces: scan them too
        new_active |= rem * np.linalg.norm(V, axis=1) > LONG_STEP
        theta = np.ones(len(idx))
        ev = np.flatnonzero(new_active) if k < max_events else np.zeros(0, dtype=int)
        if len(ev):
            theta[ev] = _locate(phi, xr[ev], V[ev] * rem[ev, None], tuple(a[ev] for a in ref), scan)
        step = theta * rem
        end = xr + step[:, None] * V
        cut = theta < 1.0
        ve, ge = tv.copy(), tg.copy()
        if np.any(cut):
            ve[cut], ge[cut] = phi.candidates(end[cut], reduced=False)
        cand_v[idx], cand_g[idx] = ve, ge
        # on a cut sub-segment the integrand at the landing point is the one-sided
        # limit from the old active pieces, not the selection on the kink
        if np.any(cut):
            off = np.inf if getattr(phi, "sense", "min") == "min" else -np.inf
            ve = np.where(cut[:, None] & ~_old_mask(phi, ve, ge, ref), off, ve)
        Pe, He, _ = select_batch(model, phi, end, reduced=False, vals=ve, grads=ge)
        # trapezoid rule for L + H(x, p#) on the sub-segment with constant velocity V
        seg = 0.5 * (legendre(model, xr, V).L + Hs + legendre(model, end, V).L + He)
        cost[idx] += step * seg
        cur[idx] = end
        remaining[idx] = rem - step
        done = theta >= 1.0
        events[idx[~done]] += 1
        live[idx[done]] = False
        live &= remaining > 1e-15 * h
    if keep_end:
        return cur, cost, events, (cand_v, cand_g)
    return cur, cost, events


def _locate(phi, x, dx, ref, scan):
    """Fraction theta in (0, 1] where the first new branch reaches the active level."""
    eps = phi.eps_act
    thr = 0.25 * eps

    def gap(th):
        v, g = phi.candidates(x + th[:, None] * dx, reduced=False)
        return _active_gap(phi, v, _old_mask(phi, v, g, ref))

    ths = np.linspace(0.0, 1.0, scan + 1)[1:]
    gaps = np.stack([gap(np.full(len(x), th)) for th in ths], axis=1)
    hit = gaps <= thr
    first = np.where(hit.any(axis=1), np.argmax(hit, axis=1), scan - 1)
    lo = np.where(first > 0, ths[np.maximum(first - 1, 0)], 0.0)
    hi = ths[first]
    for _ in range(70):
        mid = 0.5 * (lo + hi)
        inside = gap(mid) <= thr
        hi = np.where(inside, mid, hi)
        lo = np.where(inside, lo, mid)
    return hi


def euler_batch(model, phi, X0, T_end: float, h: float, *, events: bool = True):
    """Vectorised broken-characteristic integration for many start points.

    Returns times (M,), lifted paths (M, N, d), per-step costs (M-1, N).
    """
    if not h > 0:
        raise ValueError("h must be positive")
    X = reduce(np.atleast_2d(np.asarray(X0, dtype=float)))
    nsteps = int(np.ceil(T_end / h - 1e-9))
    times = np.arange(nsteps + 1) * h
    path = [X.copy()]
    costs = []
    start = None
    for _ in range(nsteps):
        if events:
            Xn, c, _, start = _euler_step(model, phi, X, h, start=start, keep_end=True)
        else:
            vals, grads = phi.candidates(X, reduced=False)
            P, Hs, _ = select_batch(model, phi, X, reduced=False, vals=vals, grads=grads)
            V = model.H_p(X, P)
            Xn = X + h * V
            _, He, _ = select_batch(model, phi, Xn, reduced=False)
            c = 0.5 * h * (legendre(model, X, V).L + Hs + legendre(model, Xn, V).L + He)
        X = Xn
        path.append(X.copy())
        costs.append(c)
    return times, np.stack(path), np.stack(costs) if costs else np.zeros((0, len(X)))


def integrate_euler(model, phi, x0, T_end: float, h: float, *, events: bool = True) -> CharacteristicRun:
    """x_{n+1} = x_n + h H_p(x_n, p#(x_n)), with kink landing (see module docstring)."""
    x0 = as_coords(x0, model.dim)
    times, path, costs = euler_batch(model, phi, x0[None], T_end, h, events=events)
    z = path[:, 0]
    P, Hs, _ = select_batch(model, phi, z, reduced=False)
    curve = Curve(times, z)
    return CharacteristicRun(curve, "euler", P, Hs, costs[:, 0], {"h": h, "events": events})


def integrate_euler_td(model, phi_t, x0, T_end: float, h: float) -> CharacteristicRun:
    """Euler for the time-dependent selection x' = H_p(x, p#(t, x)); records q#."""
    x = as_coords(x0, model.dim).astype(float).copy()
    n = int(np.ceil(T_end / h - 1e-9))
    pts, ps, hs, qs = [x.copy()], [], [], []
    for k in range(n + 1):
        q, p = minimal_energy_selection_td(model, phi_t, k * h, x)
        ps.append(p)
        qs.append(q)
        hs.append(float(model.H(reduce(x), p)))
        if k < n:
            x = x + h * model.H_p(reduce(x), p)
            pts.append(x.copy())
    curve = Curve(np.arange(n + 1) * h, np.array(pts))
    return CharacteristicRun(curve, "euler-td", np.array(ps), np.array(hs), None,
                             {"q_sharp": np.array(qs), "h": h})


# ---------------------------------------------------------------------------
# mollified and intrinsic constructions
# ---------------------------------------------------------------------------


def sup_distance(run_a: CharacteristicRun, run_b: CharacteristicRun, times=None) -> float:
    """Sup over common times of the torus distance, with linear interpolation of lifted paths."""
    if times is None:
        t_end = min(run_a.times[-1], run_b.times[-1])
        times = np.union1d(run_a.times[run_a.times <= t_end], run_b.times[run_b.times <= t_end])
    a = _interp(run_a, times)
    b = _interp(run_b, times)
    diff = a - b
    diff = diff - np.round(diff)
    return float(np.max(np.linalg.norm(diff, axis=1)))


def _interp(run, times):
    z = run.lifted
    return np.stack([np.interp(times, run.times, z[:, k]) for k in range(z.shape[1])], axis=1)


def _mollified_run(model, phi_k, phi, x0, T_end, h, rtol, atol):
    d = model.dim

    def rhs(t, y):
        x = y[None, :]
        p = phi_k.active_gradient(x)
        return model.H_p(x, p)[0]

    def jac(t, y):
        x = y[None, :]
        p = phi_k.active_gradient(x)
        D2 = phi_k.piece_hessians(x)[:, 0]
        J = model.H_pp(x, p)[0] @ D2[0]
        if model.H_xp is not None:
            J = J + model.H_xp(x, p)[0].T
        return J

    times = np.arange(int(np.ceil(T_end / h - 1e-9)) + 1) * h
    sol = solve_ivp(rhs, (0.0, times[-1]), np.asarray(x0, dtype=float), method="Radau",
                    t_eval=times, jac=jac, rtol=rtol, atol=atol)
    if not sol.success:
        from .errors import NonConvergence
        raise NonConvergence(f"mollified integration failed: {sol.message}")
    z = sol.y.T
    P, Hs, _ = select_batch(model, phi, z, reduced=False)
    return CharacteristicRun(Curve(times, z), "mollified", P, Hs, None, {"k": None})


def integrate_mollified(model, phi, x0, T_end: float, k_schedule, h: float, *, tol: float = 1e-2,
                        rtol: float = 1e-10, atol: float = 1e-12) -> CharacteristicRun:
    """Classical characteristics of soft-min regularisations, Cauchy-checked across k."""
    ks = [float(k) for k in k_schedule]
    if not ks:
        raise ValueError("k_schedule must be nonempty")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("k_schedule must be increasing")
    x0 = as_coords(x0, model.dim)
    runs = []
    for k in ks:
        run = _mollified_run(model, mollify(phi, k), phi, x0, T_end, h, rtol, atol)
        run.diagnostics["k"] = k
        runs.append(run)
    gaps = [sup_distance(a, b) for a, b in zip(runs, runs[1:])]
    last = runs[-1]
    last.diagnostics.update({"k_schedule": ks, "cauchy_gaps": gaps, "tol": tol})
    if gaps and gaps[-1] > tol:
        raise NotCauchy(f"mollified schedule not Cauchy: last gap {gaps[-1]:.3g} > {tol}", gaps)
    return last


def _intrinsic_run(model, phi, x0, T_end, w, check_points):
    n_int = int(np.ceil(T_end / w - 1e-9))
    x = as_coords(x0, model.dim).astype(float)
    W = LaxOleinikFn(model, phi, w, "pos")
    times, pts, moms, argmax_pts = [0.0], [x.copy()], [], []
    field_err = 0.0
    steps = default_steps(w)
    for i in range(n_int):
        width = min(w, T_end - i * w)
        Wi = W if abs(width - w) < 1e-15 else LaxOleinikFn(model, phi, width, "pos")
        base = reduce(x)
        res = Wi.search(base[None])
        p0 = res.momenta[0, 0]
        fb = integrate(model, base[None], p0[None], width, steps, keep_path=True)
        seg = fb.path_x[:, 0] + (x - base)
        ts = i * w + np.linspace(0.0, width, steps + 1)
        times.extend(ts[1:])
        pts.extend(seg[1:])
        moms.extend(fb.path_p[:-1, 0])
        argmax_pts.append(seg[-1])
        if i in check_points and width > 0:
            j = steps // 2
            s = width * j / steps
            Wm = LaxOleinikFn(model, phi, width - s, "pos")
            g = Wm.active_gradient(reduce(seg[j]))
            field_err = max(field_err, float(np.linalg.norm(g - fb.path_p[j, 0])))
        x = seg[-1]
    moms.append(fb.path_p[-1, 0])
    z = np.array(pts)
    P, Hs, _ = select_batch(model, phi, z, reduced=False)
    run = CharacteristicRun(Curve(np.array(times), z, np.array(moms)), "intrinsic", P, Hs, None,
                            {"width": w, "field_identity_error": field_err,
                             "argmax_points": np.array(argmax_pts)})
    return run


def integrate_intrinsic(model, phi, x0, T_end: float, widths, *, tol: float = 2e-2,
                        horizon: float | None = None, check_intervals: int = 8) -> CharacteristicRun:
    """Intrinsic construction over a decreasing schedule of partition widths."""
    ws = [float(w) for w in widths]
    if not ws:
        raise ValueError("widths must be nonempty")
    if any(b >= a for a, b in zip(ws, ws[1:])):
        raise ValueError("widths must be decreasing")
    lam = default_speed_bound(model, getattr(phi, "lipschitz_constant", None))
    for w in ws:
        _check_horizon(model, w, lam, horizon)
    runs = []
    for w in ws:
        n_int = int(np.ceil(T_end / w - 1e-9))
        checks = set(np.linspace(0, n_int - 1, min(check_intervals, n_int)).astype(int).tolist())
        runs.append(_intrinsic_run(model, phi, x0, T_end, w, checks))
    gaps = [sup_distance(a, b) for a, b in zip(runs, runs[1:])]
    last = runs[-1]
    last.diagnostics.update({"widths": ws, "cauchy_gaps": gaps, "tol": tol})
    if gaps and gaps[-1] > tol:
        raise NotCauchy(f"intrinsic schedule not Cauchy: last gap {gaps[-1]:.3g} > {tol}", gaps)
    return last


# ---------------------------------------------------------------------------
# verifiers
# ---------------------------------------------------------------------------


def _segment_costs(model, phi, run, eps_act=None, h_values=None):
    """Trapezoid rule for L(x, v) + H(x, p#(x)) on every sample interval.

    When an interval ends on a kink reached from one side (or starts on a kink
    it leaves), the endpoint integrand is the one-sided limit taken with the
    pieces active on the open side, since the selection jumps only at the end.
    """
    z = run.lifted
    dt = np.diff(run.times)
    V = np.diff(z, axis=0) / dt[:, None]
    L0 = legendre(model, z[:-1], V).L
    L1 = legendre(model, z[1:], V).L
    if h_values is not None:
        Hs = np.asarray(h_values, dtype=float)
        return 0.5 * dt * (L0 + Hs[:-1] + L1 + Hs[1:])
    ph = _with_eps(phi, eps_act)
    vals, grads = ph.candidates(z, reduced=False)
    act = ph.active_mask(vals)
    Hs = select_batch(model, ph, z, reduced=False, vals=vals, grads=grads)[1]
    H0, H1 = Hs[:-1].copy(), Hs[1:].copy()
    a0, a1 = act[:-1], act[1:]
    arrive = np.all(a1 | ~a0, axis=1) & np.any(a1 & ~a0, axis=1)
    leave = np.all(a0 | ~a1, axis=1) & np.any(a0 & ~a1, axis=1)
    off = np.inf if ph.sense == "min" else -np.inf
    for rows, k, mask, out in ((arrive, 1, a0, H1), (leave, 0, a1, H0)):
        r = np.flatnonzero(rows)
        if len(r):
            j = r + k
            masked = np.where(mask[r], vals[j], off)
            out[r] = select_batch(model, ph, z[j], reduced=False, vals=masked, grads=grads[j])[1]
    return 0.5 * dt * (L0 + H0 + L1 + H1)


def _with_eps(phi, eps_act):
    if eps_act is None or eps_act == phi.eps_act:
        return phi
    return MinSmoothFn(phi.pieces, dim=phi.dim, eps_act=eps_act, sense=phi.sense,
                       semiconcavity_constant=phi.semiconcavity_constant,
                       lipschitz_constant=phi.lipschitz_constant)


def _select(model, phi, z, eps_act):
    return select_batch(model, _with_eps(phi, eps_act), z, reduced=False)


def edi_defects(model, phi, run: CharacteristicRun, *, eps_act: float | None = None, q_sharp=None):
    """Cumulative signed defect C(t_k) = phi(gamma(t_k)) - phi(gamma(0)) - int_0^{t_k} (L + H(p#))."""
    if len(run.times) < 2:
        raise ValueError("run needs at least two samples")
    z = run.lifted
    if q_sharp is not None:
        # time-dependent pair: H(x, p#(t, x)) is the recorded h_value of the run
        q_sharp = np.asarray(q_sharp, dtype=float)
        costs = _segment_costs(model, phi, run, h_values=run.h_value)
        costs = costs + 0.5 * np.diff(run.times) * (q_sharp[:-1] + q_sharp[1:])
        best = np.min if getattr(phi, "sense", "min") == "min" else np.max
        vals = np.array([best(phi.time_candidates(zz[None], t)[0]) for zz, t in zip(z, run.times)])
    else:
        costs = run.step_cost if run.step_cost is not None and eps_act is None else \
            _segment_costs(model, phi, run, eps_act)
        vals = phi.value(z, reduced=False)
    inc = np.diff(vals)
    return np.concatenate([[0.0], np.cumsum(inc - costs)])


def edi_residual(model, phi, run: CharacteristicRun, *, eps_act: float | None = None,
                 q_sharp=None, signed: bool = False):
    """max over sample pairs of |C(t2) - C(t1)|, divided by the run length.

    With ``signed=True`` also returns the total signed defect per unit time
    (nonpositive up to discretisation for any curve).
    """
    C = edi_defects(model, phi, run, eps_act=eps_act, q_sharp=q_sharp)
    T = run.times[-1] - run.times[0]
    res = float((C.max() - C.min()) / T)
    return (res, float(C[-1] / T)) if signed else res


def lambda_hat(model, phi, samples: int = 4096, seed: int = 0) -> float:
    """C^2 + C0 C^2 with C = sup |(H_x, H_p)| over |p| <= Lip(phi), C0 the semiconcavity constant."""
    rng = np.random.default_rng(seed)
    d = model.dim
    L0 = phi.lipschitz_constant
    x = rng.random((samples, d))
    dirs = rng.normal(size=(samples, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = L0 * np.sqrt(rng.random(samples)) if d == 2 else L0 * rng.uniform(-1, 1, samples)[:, None][:, 0]
    p = dirs * np.abs(np.atleast_1d(r))[:, None]
    # include the extreme radius, where |H_p| is largest for the built-in models
    p = np.concatenate([p, dirs * L0])
    x = np.concatenate([x, x])
    DH = np.concatenate([model.H_x(x, p), model.H_p(x, p)], axis=1)
    C = float(np.max(np.linalg.norm(DH, axis=1)))
    C0 = float(phi.semiconcavity_constant)
    return C * C + C0 * C * C


def energy_profile(model, phi, run: CharacteristicRun, *, slack: float = 0.1) -> dict:
    """Largest one-sided increase rate of h(t) = H(gamma, p#(gamma)) against lambda-hat."""
    h = run.h_value
    dt = np.diff(run.times)
    rates = np.diff(h) / dt
    rate = float(rates.max()) if len(rates) else 0.0
    lam = lambda_hat(model, phi)
    return {"max_increase_rate": rate, "lambda_hat": lam, "violation": bool(rate > lam + slack),
            "max_drop": float(-rates.min()) if len(rates) else 0.0}


def gc_membership(model, phi, run: CharacteristicRun, tol: float = 1e-3) -> dict:
    """Distance of each step velocity to co H_p(x, D+phi(x)) at the step endpoints."""
    z = run.lifted
    V = np.diff(z, axis=0) / np.diff(run.times)[:, None]
    vals, grads = phi.candidates(z, reduced=False)
    mask = phi.active_mask(vals)
    gaps = np.zeros(len(V))
    for n in range(len(V)):
        verts = []
        for j in (n, n + 1):
            Vj, _ = vertices_from(vals[j], grads[j], mask[j])
            verts.append(model.H_p(np.broadcast_to(reduce(z[j]), Vj.shape), Vj))
        Q = np.concatenate(verts)
        if len(Q) == 1:
            gaps[n] = float(np.linalg.norm(V[n] - Q[0]))
        else:
            gaps[n] = hull_distance(V[n], Q)
    gmax = float(gaps.max()) if len(gaps) else 0.0
    return {"max_inclusion_gap": gmax, "passed": gmax <= tol, "gaps": gaps}


def velocity_selection_mismatch(model, phi, run: CharacteristicRun) -> float:
    """L1-in-time mismatch between step velocities and H_p(x, p#(x)) at the step start."""
    z = run.lifted
    dt = np.diff(run.times)
    V = np.diff(z, axis=0) / dt[:, None]
    P, _, _ = select_batch(model, phi, z[:-1], reduced=False)
    W = model.H_p(z[:-1], P)
    return float(np.sum(np.linalg.norm(V - W, axis=1) * dt))


def fenchel_check(model, phi, x) -> dict:
    """<p#, H_p(x, p#)> against the directional derivative of phi along H_p(x, p#)."""
    sel = minimal_energy_selection(model, phi, x)
    x = reduce(as_coords(x, model.dim))
    v = model.H_p(x, sel.p_sharp)
    lhs = float(sel.p_sharp @ v)
    rhs = directional_derivative(phi, x, v)
    others = [float(abs(q @ model.H_p(x, q) - directional_derivative(phi, x, model.H_p(x, q))))
              for q in sel.vertices if np.linalg.norm(q - sel.p_sharp) > 1e-9]
    return {"gap": abs(lhs - rhs), "other_vertex_gaps": others}


def window_average_gaps(model, phi, run: CharacteristicRun, observable, t: float, widths) -> list[float]:
    """|mean over [t, t+w] of f(gamma, p#) - f(gamma(t), p#(gamma(t)))| for each width."""
    times = run.times
    vals = observable(run.lifted, run.p_sharp)
    i0 = int(np.searchsorted(times, t - 1e-12))
    base = vals[i0]
    out = []
    for w in widths:
        sel = (times >= times[i0]) & (times <= times[i0] + w + 1e-12)
        seg_t, seg_v = times[sel], vals[sel]
        avg = np.trapezoid(seg_v, seg_t) / (seg_t[-1] - seg_t[0]) if len(seg_t) > 1 else seg_v[0]
        out.append(float(abs(avg - base)))
    return out


def stability_harness(models, phis, runs, limit_model, limit_phi, *, grid_points: int = 512,
                      edi_tol: float = 5e-3, excise: float = 0.05, seed: int = 0) -> dict:
    """Check the stability hypotheses along a sequence and the EDI equality of the limit.

    The limit selection uses an activity tolerance enlarged by the observed
    distance to the limit (value gap plus Lipschitz times curve gap), because a
    limit curve is only known to the accuracy of the sequence.
    """
    if not (len(models) == len(phis) == len(runs)) or len(runs) == 0:
        raise HypothesisViolated("sequences must be nonempty and of equal length")
    d = limit_model.dim
    rng = np.random.default_rng(seed)
    xs = rng.random((grid_points, d))
    ps = rng.normal(size=(grid_points, d)) * 3
    phi_gaps = [float(np.max(np.abs(f.value(xs) - limit_phi.value(xs)))) for f in phis]
    ham_gaps = [float(np.max(np.abs(m.H(xs, ps) - limit_model.H(xs, ps)))) for m in models]
    curve_gaps = [sup_distance(a, b) for a, b in zip(runs, runs[1:])]
    tail = max(1, len(runs) // 2)

    def decreasing_tail(seq):
        s = seq[-tail - 1:] if len(seq) > tail else seq
        return all(b <= a * (1 + 1e-6) + 1e-12 for a, b in zip(s, s[1:]))

    if len(runs) > 1:
        for name, seq in (("phi", phi_gaps), ("H", ham_gaps), ("curve", curve_gaps)):
            if seq and not decreasing_tail(seq) and seq[-1] > 1e-8:
                raise HypothesisViolated(f"{name} sequence does not converge: {seq}")
    last = runs[-1]
    curve_err = curve_gaps[-1] if curve_gaps else 0.0
    enlarged = max(limit_phi.eps_act,
                   2 * phi_gaps[-1] + 2 * limit_phi.lipschitz_constant * curve_err + 1e-9)
    edi = edi_residual(limit_model, limit_phi, last, eps_act=enlarged if enlarged > limit_phi.eps_act else None)
    # selection convergence outside an excised set of times
    pk, _, _ = select_batch(models[-1], phis[-1], last.lifted, reduced=False)
    pl, _, _ = _select(limit_model, limit_phi, last.lifted, enlarged)
    diff = np.linalg.norm(pk - pl, axis=1)
    keep = np.sort(diff)[: max(1, int(np.floor((1 - excise) * len(diff))))]
    return {
        "phi_gaps": phi_gaps, "hamiltonian_gaps": ham_gaps, "curve_gaps": curve_gaps,
        "limit_edi_residual": edi, "edi_passed": edi <= edi_tol, "activity_tolerance": enlarged,
        "selection_gap_outside_excised": float(keep.max()), "excised_fraction": excise,
    }

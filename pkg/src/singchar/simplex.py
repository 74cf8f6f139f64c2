"""Convex minimisation over the convex hull of a few points.

Problems have the form min_w f(sum_i w_i q_i) over the unit simplex, with f
convex and smooth. Vertex counts are tiny (at most about 8), so we use

* one vertex: trivial;
* two vertices: safeguarded Newton on the segment (vectorised over a batch);
* more: Frank-Wolfe with away steps, then an exact face polish that
  minimises f on the affine hull of every affinely independent vertex subset
  and keeps the best feasible candidate.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HullMinimum:
    weights: np.ndarray
    point: np.ndarray
    value: float
    iterations: int
    gap: float


def segment_minimize(g1: Callable, g2: Callable, n: int, *, tol: float = 1e-14,
                     max_iter: int = 80) -> np.ndarray:
    """Batched minimiser s in [0, 1] of convex g with derivatives ``g1(s)``, ``g2(s)``.

    ``g1`` and ``g2`` take an array of ``n`` parameters and return arrays of
    shape ``(n,)``. Ties at an endpoint go to ``s = 0``.
    """
    lo = np.zeros(n)
    hi = np.ones(n)
    d0 = g1(lo)
    d1 = g1(hi)
    at_lo = d0 >= 0
    at_hi = (d1 <= 0) & ~at_lo
    s = np.where(at_lo, 0.0, np.where(at_hi, 1.0, 0.5))
    live = ~(at_lo | at_hi)
    for _ in range(max_iter):
        if not np.any(live):
            break
        d = g1(s)
        c = g2(s)
        done = np.abs(d) <= tol * np.maximum(1.0, c)
        lo = np.where(live & (d < 0), s, lo)
        hi = np.where(live & (d > 0), s, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = s - d / c
        ok = (c > 0) & (newton > lo) & (newton < hi)
        nxt = np.where(ok, newton, 0.5 * (lo + hi))
        step = np.abs(nxt - s)
        s = np.where(live & ~done, nxt, s)
        live = live & ~done & (step > 1e-17)
    return s


def _line_min(f_grad, f_hess, p, direction, smax):
    """Exact minimiser of the convex map s -> f(p + s dir) on [0, smax]."""
    if smax <= 0:
        return 0.0
    dd = direction * smax

    def g1(s):
        return np.array([f_grad(p + s[0] * dd) @ dd])

    def g2(s):
        return np.array([dd @ f_hess(p + s[0] * dd) @ dd])

    return float(segment_minimize(g1, g2, 1)[0]) * smax


def frank_wolfe(f, f_grad, f_hess, Q: np.ndarray, *, max_iter: int = 200,
                gap_tol: float = 1e-12) -> HullMinimum:
    """Away-step Frank-Wolfe over conv(Q) starting from vertex 0."""
    m = len(Q)
    w = np.zeros(m)
    w[0] = 1.0
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = w @ Q
        g = f_grad(p)
        scores = Q @ g
        s_idx = int(np.argmin(scores))  # first index on ties
        support = np.flatnonzero(w > 0)
        a_idx = int(support[np.argmax(scores[support])])
        fw_gap = float(g @ p - scores[s_idx])
        gap = fw_gap
        if fw_gap <= gap_tol:
            break
        away_gap = float(scores[a_idx] - g @ p)
        if fw_gap >= away_gap:
            direction = Q[s_idx] - p
            smax = 1.0
            step = _line_min(f_grad, f_hess, p, direction, smax)
            w *= 1.0 - step
            w[s_idx] += step
        else:
            direction = p - Q[a_idx]
            wa = w[a_idx]
            smax = wa / (1.0 - wa) if wa < 1.0 else 0.0
            step = _line_min(f_grad, f_hess, p, direction, smax)
            w *= 1.0 + step
            w[a_idx] -= step
            if step >= smax * (1 - 1e-15):
                w[a_idx] = 0.0
        w = np.clip(w, 0.0, None)
        w /= w.sum()
    p = w @ Q
    return HullMinimum(w, p, float(f(p)), it, max(gap, 0.0))


def _affinely_independent(P: np.ndarray) -> bool:
    if len(P) == 1:
        return True
    D = (P[1:] - P[0]).T
    sv = np.linalg.svd(D, compute_uv=False)
    return sv[-1] > 1e-10 * max(1.0, sv[0])


def _face_min(f, f_grad, f_hess, P: np.ndarray, max_iter: int = 60):
    """Minimise f on the affine hull of the rows of P; returns barycentric weights or None."""
    k = len(P)
    if k == 1:
        return np.ones(1)
    D = (P[1:] - P[0]).T
    beta = np.full(k - 1, 1.0 / k)
    for _ in range(max_iter):
        p = P[0] + D @ beta
        gr = D.T @ f_grad(p)
        Hr = D.T @ f_hess(p) @ D
        ev = np.linalg.eigvalsh(Hr)
        if ev[0] <= 1e-12 * max(1.0, abs(ev[-1])):
            return None  # flat direction: the face minimum sits on its boundary
        step = np.linalg.solve(Hr, gr)
        t = 1.0
        f0 = f(p)
        while t > 1e-12 and f(P[0] + D @ (beta - t * step)) > f0 + 1e-16 * max(1.0, abs(f0)):
            t *= 0.5
        beta = beta - t * step
        if np.linalg.norm(t * step) <= 1e-15 * max(1.0, np.linalg.norm(beta)):
            break
    return np.concatenate([[1.0 - beta.sum()], beta])


def polish(f, f_grad, f_hess, Q: np.ndarray, max_face: int | None = None) -> HullMinimum | None:
    """Exact minimum by enumeration of affinely independent vertex subsets."""
    m, dim = Q.shape
    max_face = min(m, dim + 1) if max_face is None else max_face
    best = None
    for size in range(1, max_face + 1):
        for S in itertools.combinations(range(m), size):
            P = Q[list(S)]
            if not _affinely_independent(P):
                continue
            a = _face_min(f, f_grad, f_hess, P)
            if a is None or np.any(a < -1e-12):
                continue
            a = np.clip(a, 0.0, None)
            a /= a.sum()
            p = a @ P
            val = float(f(p))
            if best is None or val < best[0] - 1e-15 * max(1.0, abs(val)):
                w = np.zeros(m)
                w[list(S)] = a
                best = (val, w, p)
    if best is None:
        return None
    return HullMinimum(best[1], best[2], best[0], 0, 0.0)


def minimize_over_hull(f, f_grad, f_hess, Q, *, max_iter: int = 200,
                       gap_tol: float = 1e-12) -> HullMinimum:
    """Minimise convex ``f`` over conv(Q). ``Q`` has shape (m, D)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    m = len(Q)
    if m == 1:
        return HullMinimum(np.ones(1), Q[0].copy(), float(f(Q[0])), 0, 0.0)
    if m == 2:
        dq = Q[1] - Q[0]
        s = segment_minimize(
            lambda s: np.array([f_grad(Q[0] + s[0] * dq) @ dq]),
            lambda s: np.array([dq @ f_hess(Q[0] + s[0] * dq) @ dq]), 1)[0]
        p = Q[0] + s * dq
        return HullMinimum(np.array([1.0 - s, s]), p, float(f(p)), 1, 0.0)
    fw = frank_wolfe(f, f_grad, f_hess, Q, max_iter=max_iter, gap_tol=gap_tol)
    pol = polish(f, f_grad, f_hess, Q)
    if pol is not None and pol.value <= fw.value + 1e-14 * max(1.0, abs(fw.value)):
        return HullMinimum(pol.weights, pol.point, pol.value, fw.iterations, fw.gap)
    return fw


def hull_distance(z, Q) -> float:
    """Euclidean distance from ``z`` to conv(Q)."""
    z = np.asarray(z, dtype=float)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    eye = np.eye(Q.shape[1])
    res = minimize_over_hull(lambda p: 0.5 * np.sum((p - z) ** 2), lambda p: p - z,
                             lambda p: eye, Q)
    return float(np.linalg.norm(res.point - z))

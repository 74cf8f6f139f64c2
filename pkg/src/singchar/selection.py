"""Minimal energy selection p#(x) = argmin { H(x, p) : p in D+phi(x) }."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import as_coords, reduce
from .semiconcave import dedupe_vertices, superdifferential
from .simplex import minimize_over_hull, segment_minimize


@dataclass(frozen=True)
class SelectionResult:
    p_sharp: np.ndarray
    h_value: float
    weights: np.ndarray
    vertices: np.ndarray


def _point_problem(model, x):
    x = np.asarray(x, dtype=float)
    return (lambda p: float(model.H(x, p)), lambda p: model.H_p(x, p),
            lambda p: model.H_pp(x, p))


def select_from_vertices(model, x, V) -> SelectionResult:
    """Selection over an explicit vertex list (rows of V) at the point x."""
    x = np.asarray(x, dtype=float)
    V = np.atleast_2d(np.asarray(V, dtype=float))
    res = minimize_over_hull(*_point_problem(model, x), V)
    return SelectionResult(res.point, float(model.H(x, res.point)), res.weights, V)


def minimal_energy_selection(model, phi, x) -> SelectionResult:
    """Deterministic p#: vertices in piece order, first-index tie-breaks."""
    x = reduce(as_coords(x, model.dim))
    sd = superdifferential(phi, x)
    return select_from_vertices(model, x, sd.vertices)


def select_batch(model, phi, xs, *, reduced: bool = True, vals=None, grads=None):
    """Vectorised selection at points ``xs`` (N, d).

    Returns ``(p_sharp (N, d), h_value (N,), n_active (N,))``. With
    ``reduced=False`` pieces are evaluated at the given (lifted) coordinates.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if vals is None:
        vals, grads = phi.candidates(xs, reduced=reduced)
    xe = reduce(xs) if reduced else xs
    mask = phi.active_mask(vals)
    counts = mask.sum(axis=1)
    n, d = xs.shape
    first = np.argmax(mask, axis=1)
    P = grads[np.arange(n), first].copy()
    two = np.flatnonzero(counts == 2)
    if len(two):
        order = np.argsort(~mask[two], axis=1, kind="stable")[:, :2]
        q0 = grads[two, order[:, 0]]
        dq = grads[two, order[:, 1]] - q0
        x2 = xe[two]
        s = segment_minimize(
            lambda s: np.sum(model.H_p(x2, q0 + s[:, None] * dq) * dq, axis=1),
            lambda s: np.einsum("ni,nij,nj->n", dq, model.H_pp(x2, q0 + s[:, None] * dq), dq),
            len(two))
        P[two] = q0 + s[:, None] * dq
    for i in np.flatnonzero(counts > 2):
        V, _ = dedupe_vertices(grads[i][mask[i]])
        P[i] = minimize_over_hull(*_point_problem(model, xe[i]), V).point
    return P, model.H(xe, P), counts


def minimal_energy_selection_td(model, phi_t, t: float, x):
    """(q#, p#) minimising q + H(x, p) over co{(d_t psi_i, grad psi_i) : i active}."""
    x = reduce(as_coords(x, model.dim))
    vals, grads, dts = phi_t.time_candidates(x[None], t)
    mask = phi_t.active_mask(vals)[0]
    Z = np.concatenate([dts[0][mask][:, None], grads[0][mask]], axis=1)
    Z, _ = dedupe_vertices(Z)
    d = model.dim

    def f(z):
        return float(z[0] + model.H(x, z[1:]))

    def g(z):
        return np.concatenate([[1.0], model.H_p(x, z[1:])])

    def h(z):
        out = np.zeros((d + 1, d + 1))
        out[1:, 1:] = model.H_pp(x, z[1:])
        return out

    res = minimize_over_hull(f, g, h, Z)
    return float(res.point[0]), res.point[1:].copy()

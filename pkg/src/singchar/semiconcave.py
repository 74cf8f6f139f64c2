"""Semiconcave functions as finite minima of smooth pieces.

A :class:`MinSmoothFn` is phi(x) = min_i psi_i(x). Its superdifferential at x
is the convex hull of the gradients of the pieces that are active (within
``eps_act`` of the minimum), which is exact for this representation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import as_coords, reduce
from .hamiltonian import TrigPotential

logger = logging.getLogger(__name__)

EPS_ACT = 1e-9


@dataclass(frozen=True, eq=False)
class SmoothPiece:
    """A C^2 scalar function with vectorised value/gradient/Hessian.

    ``dt`` is the optional time derivative for time-dependent families; the
    evaluators then take ``(x, t)``.
    """

    value: Callable
    grad: Callable
    hess: Callable | None = None
    hess_bound: float = np.inf
    lipschitz: float = np.inf
    dt: Callable | None = None
    label: str = ""


def trig_piece(potential: TrigPotential, label: str = "") -> SmoothPiece:
    """Piece given by a trigonometric polynomial (real wavevectors allowed)."""
    k = potential.wavevectors
    amp = np.hypot(potential.cos_coeffs, potential.sin_coeffs)
    knorm = np.linalg.norm(k, axis=1) if len(k) else np.zeros(0)
    return SmoothPiece(
        value=potential.value,
        grad=potential.grad,
        hess=potential.hess,
        hess_bound=float(np.sum(amp * (2 * np.pi * knorm) ** 2)),
        lipschitz=potential.grad_bound(),
        label=label,
    )


def _trig(dim, modes, cos=None, sin=None, const=0.0, label=""):
    modes = np.asarray(modes, dtype=float).reshape(-1, dim)
    n = len(modes)
    return trig_piece(TrigPotential(modes, np.zeros(n) if cos is None else cos,
                                    np.zeros(n) if sin is None else sin, const), label)


@dataclass(frozen=True, eq=False)
class MinSmoothFn:
    """phi = min (or max, for ``sense='max'``) over smooth pieces.

    ``semiconcavity_constant`` defaults to the largest piece Hessian bound.
    """

    pieces: Sequence[SmoothPiece]
    dim: int = 1
    eps_act: float = EPS_ACT
    sense: str = "min"
    semiconcavity_constant: float | None = None
    lipschitz_constant: float | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.pieces:
            raise ValueError("MinSmoothFn needs at least one piece")
        if self.sense not in ("min", "max"):
            raise ValueError("sense must be 'min' or 'max'")
        if self.semiconcavity_constant is None:
            object.__setattr__(self, "semiconcavity_constant",
                               float(max(p.hess_bound for p in self.pieces)))
        if self.lipschitz_constant is None:
            object.__setattr__(self, "lipschitz_constant",
                               float(max(p.lipschitz for p in self.pieces)))

    @property
    def n_pieces(self) -> int:
        return len(self.pieces)

    @property
    def semiconcave(self) -> bool:
        return self.sense == "min"

    # -- batched evaluation -------------------------------------------------
    def candidates(self, x, *, reduced: bool = True):
        """Piece values ``(N, K)`` and gradients ``(N, K, d)`` at points ``(N, d)``."""
        x = as_coords(x, self.dim).reshape(-1, self.dim)
        if reduced:
            x = reduce(x)
        vals = np.stack([np.broadcast_to(p.value(x), x.shape[:1]) for p in self.pieces], axis=1)
        grads = np.stack([np.broadcast_to(p.grad(x), x.shape) for p in self.pieces], axis=1)
        return vals, grads

    def piece_hessians(self, x, *, reduced: bool = True) -> np.ndarray:
        x = as_coords(x, self.dim).reshape(-1, self.dim)
        if reduced:
            x = reduce(x)
        out = []
        for p in self.pieces:
            if p.hess is None:
                raise ValueError("piece without Hessian")
            out.append(np.broadcast_to(p.hess(x), x.shape + (self.dim,)))
        return np.stack(out, axis=1)

    def _best(self, vals):
        return vals.min(axis=1) if self.sense == "min" else vals.max(axis=1)

    def active_mask(self, vals) -> np.ndarray:
        best = self._best(vals)[:, None]
        gap = vals - best if self.sense == "min" else best - vals
        return gap <= self.eps_act

    def value(self, x, *, reduced: bool = True):
        vals, _ = self.candidates(x, reduced=reduced)
        out = self._best(vals)
        return float(out[0]) if np.ndim(x) <= 1 else out.reshape(np.shape(x)[:-1])

    __call__ = value

    def active_gradient(self, x, *, reduced: bool = True) -> np.ndarray:
        """Gradient of the first active piece (the derivative at smooth points)."""
        vals, grads = self.candidates(x, reduced=reduced)
        idx = np.argmax(self.active_mask(vals), axis=1)
        g = grads[np.arange(len(idx)), idx]
        return g[0] if np.ndim(x) <= 1 else g.reshape(np.shape(x))

    def time_candidates(self, x, t: float, *, reduced: bool = True):
        """Values, gradients and time derivatives for time-dependent pieces."""
        x = as_coords(x, self.dim).reshape(-1, self.dim)
        if reduced:
            x = reduce(x)
        vals = np.stack([np.broadcast_to(p.value(x, t), x.shape[:1]) for p in self.pieces], axis=1)
        grads = np.stack([np.broadcast_to(p.grad(x, t), x.shape) for p in self.pieces], axis=1)
        dts = np.stack([np.broadcast_to(p.dt(x, t), x.shape[:1]) for p in self.pieces], axis=1)
        return vals, grads, dts


@dataclass(frozen=True)
class Superdifferential:
    vertices: np.ndarray
    base: np.ndarray
    active: tuple[int, ...]

    @property
    def diameter(self) -> float:
        V = self.vertices
        if len(V) < 2:
            return 0.0
        return float(np.max(np.linalg.norm(V[:, None, :] - V[None, :, :], axis=-1)))

    @property
    def differentiable(self) -> bool:
        return len(self.vertices) == 1


def dedupe_vertices(V: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, list[int]]:
    keep: list[int] = []
    for i, v in enumerate(V):
        if all(np.max(np.abs(v - V[j])) > tol for j in keep):
            keep.append(i)
    return V[keep], keep


def vertices_from(vals: np.ndarray, grads: np.ndarray, mask: np.ndarray):
    """Deduplicated active gradients for one point (rows of a batch)."""
    idx = np.flatnonzero(mask)
    V, keep = dedupe_vertices(grads[idx])
    return V, tuple(int(idx[k]) for k in keep)


def superdifferential(phi, x) -> Superdifferential:
    """Vertices of D+phi(x) in piece-index order."""
    x = as_coords(x, phi.dim)
    vals, grads = phi.candidates(x[None, :])
    mask = phi.active_mask(vals)[0]
    V, active = vertices_from(vals[0], grads[0], mask)
    return Superdifferential(V, reduce(x), active)


def directional_derivative(phi, x, v) -> float:
    """min over D+phi(x) of <p, v> (max for semiconvex wrappers)."""
    sd = superdifferential(phi, x)
    dots = sd.vertices @ np.asarray(v, dtype=float).reshape(-1)
    return float(dots.min() if getattr(phi, "sense", "min") == "min" else dots.max())


def mollify(phi: MinSmoothFn, k: float) -> MinSmoothFn:
    """Soft-min phi_k = -(1/k) log sum exp(-k psi_i), a single smooth piece."""
    if not k > 0:
        raise ValueError("k must be positive")
    if phi.sense != "min":
        raise ValueError("mollify expects a min-of-smooth function")
    if phi.n_pieces == 1:
        return phi

    def weights(x):
        vals, grads = phi.candidates(x)
        z = -k * vals
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
        s = e.sum(axis=1, keepdims=True)
        return vals, grads, e / s, (zmax + np.log(s))[:, 0]

    def value(x):
        shp = np.shape(x)[:-1]
        _, _, _, lse = weights(x)
        return (-lse / k).reshape(shp)

    def grad(x):
        _, grads, w, _ = weights(x)
        return np.einsum("nk,nkd->nd", w, grads).reshape(np.shape(x))

    def hess(x):
        _, grads, w, _ = weights(x)
        H = phi.piece_hessians(x)
        mean = np.einsum("nk,nkd->nd", w, grads)
        second = np.einsum("nk,nki,nkj->nij", w, grads, grads)
        out = np.einsum("nk,nkij->nij", w, H) - k * (second - mean[:, :, None] * mean[:, None, :])
        return out.reshape(np.shape(x) + (phi.dim,))

    piece = SmoothPiece(value, grad, hess, hess_bound=phi.semiconcavity_constant,
                        lipschitz=phi.lipschitz_constant, label=f"softmin(k={k:g})")
    return MinSmoothFn([piece], dim=phi.dim, eps_act=phi.eps_act,
                       semiconcavity_constant=phi.semiconcavity_constant,
                       lipschitz_constant=phi.lipschitz_constant,
                       name=f"{phi.name}_k{k:g}")


def semiconcavity_check(phi, samples: int, *, C: float | None = None, seed: int = 0) -> dict:
    """Worst violation of the linear-modulus semiconcavity inequality.

    For x, y (y taken as the nearest lift) and lambda in [0, 1]:
    lambda phi(x) + (1-lambda) phi(y) - phi(lambda x + (1-lambda) y)
        <= lambda (1-lambda) (C/2) |x - y|^2.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    C = phi.semiconcavity_constant if C is None else float(C)
    rng = np.random.default_rng(seed)
    x = rng.random((samples, phi.dim))
    y = x + rng.uniform(-0.5, 0.5, (samples, phi.dim))
    lam = rng.random(samples)
    z = lam[:, None] * x + (1 - lam[:, None]) * y
    lhs = lam * phi.value(x) + (1 - lam) * phi.value(y) - phi.value(z)
    rhs = lam * (1 - lam) * 0.5 * C * np.sum((x - y) ** 2, axis=1)
    viol = lhs - rhs
    i = int(np.argmax(viol))
    return {"max_violation": float(max(viol[i], 0.0)), "worst_signed": float(viol[i]),
            "C": C, "samples": samples}

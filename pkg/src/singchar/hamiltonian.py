"""Tonelli Hamiltonians on the flat torus, Legendre duality and the Hamiltonian flow.

All evaluators are vectorised: ``x`` and ``p`` have shape ``(..., d)``.
Second derivatives follow the convention ``H_xp[..., i, j] = d^2 H / dx_i dp_j``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonConvergence
from .geometry import as_coords, reduce

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TrigPotential:
    """V(x) = sum_k a_k cos(2 pi k.x) + b_k sin(2 pi k.x).

    Wavevectors may be real; integer ones give a 1-periodic potential.
    """

    wavevectors: np.ndarray
    cos_coeffs: np.ndarray
    sin_coeffs: np.ndarray
    const: float = 0.0

    def __post_init__(self):
        k = np.atleast_2d(np.asarray(self.wavevectors, dtype=float))
        a = np.atleast_1d(np.asarray(self.cos_coeffs, dtype=float))
        b = np.atleast_1d(np.asarray(self.sin_coeffs, dtype=float))
        if k.size == 0:
            k = np.zeros((0, max(1, k.shape[-1] if k.ndim == 2 else 1)))
        if not (len(k) == len(a) == len(b)):
            raise ValueError("wavevectors and coefficient arrays must have equal length")
        object.__setattr__(self, "wavevectors", k)
        object.__setattr__(self, "cos_coeffs", a)
        object.__setattr__(self, "sin_coeffs", b)

    @classmethod
    def zero(cls, dim: int = 1) -> TrigPotential:
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_spec(cls, spec: dict, dim: int) -> TrigPotential:
        modes = spec.get("modes", [])
        k = np.asarray(modes, dtype=float).reshape(-1, dim) if modes else np.zeros((0, dim))
        return cls(k, spec.get("cos", [0.0] * len(k)), spec.get("sin", [0.0] * len(k)),
                   float(spec.get("const", 0.0)))

    def to_spec(self) -> dict:
        return {
            "modes": self.wavevectors.tolist(),
            "cos": self.cos_coeffs.tolist(),
            "sin": self.sin_coeffs.tolist(),
            "const": self.const,
        }

    @property
    def dim(self) -> int:
        return self.wavevectors.shape[1]

    def _phase(self, x):
        return TWO_PI * np.asarray(x, dtype=float) @ self.wavevectors.T

    def value(self, x) -> np.ndarray:
        th = self._phase(x)
        return self.const + np.cos(th) @ self.cos_coeffs + np.sin(th) @ self.sin_coeffs

    def grad(self, x) -> np.ndarray:
        th = self._phase(x)
        w = -np.sin(th) * self.cos_coeffs + np.cos(th) * self.sin_coeffs
        return TWO_PI * w @ self.wavevectors

    def hess(self, x) -> np.ndarray:
        th = self._phase(x)
        w = -(np.cos(th) * self.cos_coeffs + np.sin(th) * self.sin_coeffs) * TWO_PI**2
        k = self.wavevectors
        d = k.shape[1]
        outer = (k[:, :, None] * k[:, None, :]).reshape(len(k), d * d)
        return (w @ outer).reshape(w.shape[:-1] + (d, d))

    def bound(self) -> float:
        return float(abs(self.const) + np.sum(np.hypot(self.cos_coeffs, self.sin_coeffs)))

    def grad_bound(self) -> float:
        norms = np.linalg.norm(self.wavevectors, axis=1) if len(self.wavevectors) else np.zeros(0)
        return float(TWO_PI * np.sum(norms * np.hypot(self.cos_coeffs, self.sin_coeffs)))


@dataclass(frozen=True, eq=False)
class HamiltonianModel:
    """H(x, p) with its partial derivatives.

    ``tonelli`` is true when second derivatives are available; flow-based
    operations require it. ``lagrangian`` is an optional closed form
    ``(x, v) -> (L, p*)``.
    """

    dim: int
    H: Callable
    H_p: Callable
    H_x: Callable
    H_pp: Callable | None = None
    H_xx: Callable | None = None
    H_xp: Callable | None = None
    lagrangian: Callable | None = None
    name: str = "custom"
    spec: dict = field(default_factory=dict)

    @property
    def tonelli(self) -> bool:
        return self.H_pp is not None and self.H_xx is not None

    def hessians(self, x, p):
        """(H_pp, H_xx, H_xp) at (x, p); missing mixed term means zero."""
        hpp = self.H_pp(x, p)
        hxx = self.H_xx(x, p)
        hxp = self.H_xp(x, p) if self.H_xp is not None else np.zeros_like(hpp)
        return hpp, hxx, hxp


def mechanical(potential: TrigPotential | None = None, dim: int = 1) -> HamiltonianModel:
    """H = |p|^2 / 2 + V(x), with closed-form Lagrangian |v|^2 / 2 - V(x)."""
    V = potential if potential is not None else TrigPotential.zero(dim)
    eye = np.eye(dim)

    def H(x, p):
        return 0.5 * np.sum(p * p, axis=-1) + V.value(x)

    def lag(x, v):
        v = np.asarray(v, dtype=float)
        return 0.5 * np.sum(v * v, axis=-1) - V.value(x), v.copy()

    return HamiltonianModel(
        dim=dim,
        H=H,
        H_p=lambda x, p: np.array(p, dtype=float, copy=True),
        H_x=lambda x, p: V.grad(x) + np.zeros_like(np.asarray(p, dtype=float)),
        H_pp=lambda x, p: np.broadcast_to(eye, np.shape(p)[:-1] + (dim, dim)).copy(),
        H_xx=lambda x, p: V.hess(x) + np.zeros(np.shape(p)[:-1] + (dim, dim)),
        lagrangian=lag,
        name="mechanical",
        spec={"kind": "mechanical", "dim": dim, "potential": V.to_spec()},
    )


def quartic(potential: TrigPotential | None = None, dim: int = 1) -> HamiltonianModel:
    """H = |p|^4 / 4 + |p|^2 / 2 + V(x); Lagrangian by Newton."""
    V = potential if potential is not None else TrigPotential.zero(dim)
    eye = np.eye(dim)

    def H(x, p):
        s = np.sum(p * p, axis=-1)
        return 0.25 * s * s + 0.5 * s + V.value(x)

    def H_p(x, p):
        p = np.asarray(p, dtype=float)
        return (np.sum(p * p, axis=-1, keepdims=True) + 1.0) * p

    def H_pp(x, p):
        p = np.asarray(p, dtype=float)
        s = np.sum(p * p, axis=-1)[..., None, None]
        return (s + 1.0) * eye + 2.0 * p[..., :, None] * p[..., None, :]

    return HamiltonianModel(
        dim=dim,
        H=H,
        H_p=H_p,
        H_x=lambda x, p: V.grad(x) + np.zeros_like(np.asarray(p, dtype=float)),
        H_pp=H_pp,
        H_xx=lambda x, p: V.hess(x) + np.zeros(np.shape(p)[:-1] + (dim, dim)),
        name="quartic",
        spec={"kind": "quartic", "dim": dim, "potential": V.to_spec()},
    )


def model_from_spec(spec: dict) -> HamiltonianModel:
    kind = spec.get("kind")
    dim = int(spec.get("dim", 1))
    V = TrigPotential.from_spec(spec.get("potential", {}), dim)
    if kind == "mechanical":
        return mechanical(V, dim)
    if kind == "quartic":
        return quartic(V, dim)
    raise ValueError(f"unknown Hamiltonian kind {kind!r}")


def with_extra_potential(model: HamiltonianModel, extra: TrigPotential) -> HamiltonianModel:
    """Model H + W(x) for a built-in model (used by perturbation sequences)."""
    spec = dict(model.spec)
    if spec.get("kind") not in ("mechanical", "quartic"):
        raise ValueError("only built-in models can be perturbed")
    base = TrigPotential.from_spec(spec["potential"], model.dim)
    merged = TrigPotential(
        np.vstack([base.wavevectors, extra.wavevectors]),
        np.concatenate([base.cos_coeffs, extra.cos_coeffs]),
        np.concatenate([base.sin_coeffs, extra.sin_coeffs]),
        base.const + extra.const,
    )
    return (mechanical if spec["kind"] == "mechanical" else quartic)(merged, model.dim)


@dataclass(frozen=True)
class LagrangianValue:
    L: np.ndarray | float
    p: np.ndarray


@dataclass(frozen=True)
class FlowState:
    x: np.ndarray
    p: np.ndarray
    t: float


def legendre(model: HamiltonianModel, x, v, *, tol: float = 1e-12, max_iter: int = 100) -> LagrangianValue:
    """L(x, v) = sup_p <p, v> - H(x, p) and its maximiser.

    Uses the model's closed form when present, else damped Newton from p = 0.
    """
    x = as_coords(x, model.dim)
    v = as_coords(v, model.dim)
    x, v = np.broadcast_arrays(x, v)
    if model.lagrangian is not None:
        L, p = model.lagrangian(x, v)
        return LagrangianValue(_scalar(L), np.asarray(p, dtype=float))
    if model.H_pp is None:
        raise NonConvergence("Newton Legendre transform needs H_pp")

    def objective(p):
        return np.sum(p * v, axis=-1) - model.H(x, p)

    p = np.zeros_like(v)
    obj = objective(p)
    for _ in range(max_iter):
        g = v - model.H_p(x, p)
        gnorm = np.linalg.norm(g, axis=-1)
        if np.all(gnorm <= tol * max(1.0, float(np.max(np.abs(v))))):
            break
        step = np.linalg.solve(model.H_pp(x, p), g[..., None])[..., 0]
        scale = np.ones(gnorm.shape)
        for _ in range(60):
            trial = p + scale[..., None] * step
            tobj = objective(trial)
            bad = (tobj < obj - 1e-15 * np.maximum(1.0, np.abs(obj))) & (gnorm > 0)
            if not np.any(bad):
                break
            scale = np.where(bad, 0.5 * scale, scale)
        p, obj = trial, tobj
    else:
        g = v - model.H_p(x, p)
        if np.any(np.linalg.norm(g, axis=-1) > 1e-8 * max(1.0, float(np.max(np.abs(v))))):
            raise NonConvergence("Legendre Newton iteration did not converge (is H strictly convex?)")
    return LagrangianValue(_scalar(objective(p)), p)


def energy(model: HamiltonianModel, x, v) -> np.ndarray | float:
    """E(x, v) = L_v . v - L, evaluated as H(x, p*)."""
    lv = legendre(model, x, v)
    x = np.broadcast_to(as_coords(x, model.dim), lv.p.shape)
    return _scalar(model.H(x, lv.p))


def _scalar(a):
    a = np.asarray(a, dtype=float)
    return float(a) if a.ndim == 0 else a


def check_conditions(model: HamiltonianModel, samples: int = 64, seed: int = 0) -> dict:
    """Sampled strict convexity (midpoint) and superlinear growth checks."""
    rng = np.random.default_rng(seed)
    x = rng.random((samples, model.dim))
    p = rng.normal(size=(samples, model.dim)) * 3
    q = rng.normal(size=(samples, model.dim)) * 3
    mid = model.H(x, 0.5 * (p + q))
    gap = 0.5 * (model.H(x, p) + model.H(x, q)) - mid
    convex = bool(np.all(gap[np.linalg.norm(p - q, axis=-1) > 1e-6] > 0))
    e = rng.normal(size=(samples, model.dim))
    e /= np.linalg.norm(e, axis=-1, keepdims=True)
    ratios = [float(np.min(model.H(x, r * e) / r)) for r in (1.0, 10.0, 100.0)]
    superlinear = ratios[0] < ratios[1] < ratios[2]
    return {"convex": convex, "superlinear": superlinear, "growth_ratios": ratios}


@dataclass
class FlowBatch:
    """End state of a batch of trajectories, with optional extras."""

    x: np.ndarray
    p: np.ndarray
    action: np.ndarray | None = None
    jx: np.ndarray | None = None
    jp: np.ndarray | None = None
    path_x: np.ndarray | None = None
    path_p: np.ndarray | None = None


def default_steps(t: float, dt_max: float = 1.0 / 512, min_steps: int = 4) -> int:
    return max(min_steps, int(np.ceil(abs(t) / dt_max - 1e-9)))


def integrate(model: HamiltonianModel, x0, p0, t: float, steps: int, *, action: bool = False,
              variational: bool = False, keep_path: bool = False) -> FlowBatch:
    """Fixed-step RK4 for (X', P') = (H_p, -H_x) in lifted coordinates.

    ``t`` may be negative. ``action`` accumulates the signed integral of
    L(X, X') = <P, H_p> - H. ``variational`` also propagates dX/dp0, dP/dp0.
    """
    x = np.array(x0, dtype=float)
    p = np.array(p0, dtype=float)
    x, p = np.broadcast_arrays(x, p)
    x, p = x.copy(), p.copy()
    d = x.shape[-1]
    dt = float(t) / steps
    s = np.zeros(x.shape[:-1]) if action else None
    if variational:
        jx = np.zeros(x.shape + (d,))
        jp = np.broadcast_to(np.eye(d), x.shape + (d,)).copy()
    else:
        jx = jp = None
    px = [x.copy()] if keep_path else None
    pp = [p.copy()] if keep_path else None

    def rhs(x, p, jx, jp):
        hp = model.H_p(x, p)
        out = [hp, -model.H_x(x, p)]
        if action:
            out.append(np.sum(p * hp, axis=-1) - model.H(x, p))
        if variational:
            hpp, hxx, hxp = model.hessians(x, p)
            hpx = np.swapaxes(hxp, -1, -2)
            out.append(hpx @ jx + hpp @ jp)
            out.append(-(hxx @ jx) - hxp @ jp)
        return out

    for _ in range(steps):
        k1 = rhs(x, p, jx, jp)
        k2 = rhs(x + 0.5 * dt * k1[0], p + 0.5 * dt * k1[1], *_shift(jx, jp, k1, 0.5 * dt, action))
        k3 = rhs(x + 0.5 * dt * k2[0], p + 0.5 * dt * k2[1], *_shift(jx, jp, k2, 0.5 * dt, action))
        k4 = rhs(x + dt * k3[0], p + dt * k3[1], *_shift(jx, jp, k3, dt, action))
        comb = [(a + 2 * b + 2 * c + e) * (dt / 6.0) for a, b, c, e in zip(k1, k2, k3, k4)]
        x = x + comb[0]
        p = p + comb[1]
        i = 2
        if action:
            s = s + comb[i]
            i += 1
        if variational:
            jx = jx + comb[i]
            jp = jp + comb[i + 1]
        if keep_path:
            px.append(x.copy())
            pp.append(p.copy())
    return FlowBatch(
        x=x, p=p, action=s, jx=jx, jp=jp,
        path_x=np.stack(px) if keep_path else None,
        path_p=np.stack(pp) if keep_path else None,
    )


def _shift(jx, jp, k, h, action):
    if jx is None:
        return None, None
    i = 3 if action else 2
    return jx + h * k[i], jp + h * k[i + 1]


def hamiltonian_flow(model: HamiltonianModel, x0, p0, t: float, steps: int) -> list[FlowState]:
    """All RK4 states of the Hamiltonian flow from (x0, p0) over [0, t]."""
    if not model.tonelli:
        raise ValueError("hamiltonian_flow requires a Tonelli model")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x0 = as_coords(x0, model.dim)
    p0 = as_coords(p0, model.dim)
    if t == 0:
        return [FlowState(reduce(x0), p0.copy(), 0.0)]
    fb = integrate(model, x0, p0, t, steps, keep_path=True)
    times = np.linspace(0.0, t, steps + 1)
    return [FlowState(reduce(fb.path_x[i]), fb.path_p[i], float(times[i])) for i in range(steps + 1)]

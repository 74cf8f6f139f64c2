"""Closed-form test problems used by the acceptance suite and the CLI.

F1  free motion, phi = sin 2 pi x (and the trivial weak KAM solution u = 0)
F2  phi = min(cos 2 pi x, -cos 2 pi x), kinks at 1/4 and 3/4
F3  pendulum H = p^2/2 + cos 2 pi x, weak KAM u = (2/pi)(1 - |cos pi x|), c = 1
F4  2-D phi = -|cos 2 pi x1| + eps sin 2 pi x2, eps = 0.1
F5  quartic H over F2's phi
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import reduce
from .hamiltonian import HamiltonianModel, TrigPotential, mechanical, quartic
from .semiconcave import MinSmoothFn, trig_piece

F4_EPS = 0.1


def _pot(dim, modes, cos=None, sin=None, const=0.0):
    modes = np.asarray(modes, dtype=float).reshape(-1, dim)
    n = len(modes)
    return TrigPotential(modes, np.zeros(n) if cos is None else cos,
                         np.zeros(n) if sin is None else sin, const)


def sine_phi() -> MinSmoothFn:
    return MinSmoothFn([trig_piece(_pot(1, [1.0], sin=[1.0]), "sin")], dim=1, name="sin2pix")


def zero_phi(dim: int = 1) -> MinSmoothFn:
    return MinSmoothFn([trig_piece(_pot(dim, np.zeros((0, dim))), "zero")], dim=dim, name="zero")


def kink_phi() -> MinSmoothFn:
    return MinSmoothFn([trig_piece(_pot(1, [1.0], cos=[1.0]), "cos"),
                        trig_piece(_pot(1, [1.0], cos=[-1.0]), "-cos")], dim=1, name="F2")


def pendulum_u() -> MinSmoothFn:
    # (2/pi)(1 -+ cos pi x); the pieces swap under x -> x+1, so the min is periodic.
    a = 2.0 / np.pi
    return MinSmoothFn([trig_piece(_pot(1, [0.5], cos=[-a], const=a), "a"),
                        trig_piece(_pot(1, [0.5], cos=[a], const=a), "b")],
                       dim=1, name="F3")


def pendulum_u_closed(x) -> np.ndarray:
    x = reduce(np.asarray(x, dtype=float)[..., None])[..., 0]
    return (2.0 / np.pi) * (1.0 - np.abs(np.cos(np.pi * x)))


def edge_phi(eps: float = F4_EPS) -> MinSmoothFn:
    return MinSmoothFn([trig_piece(_pot(2, [[1, 0], [0, 1]], cos=[1.0, 0.0], sin=[0.0, eps]), "+"),
                        trig_piece(_pot(2, [[1, 0], [0, 1]], cos=[-1.0, 0.0], sin=[0.0, eps]), "-")],
                       dim=2, name="F4")


def free_model(dim: int = 1) -> HamiltonianModel:
    return mechanical(TrigPotential.zero(dim), dim)


def pendulum_model(amplitude: float = 1.0) -> HamiltonianModel:
    return mechanical(_pot(1, [1.0], cos=[amplitude]), 1)


def quartic_model(dim: int = 1) -> HamiltonianModel:
    return quartic(TrigPotential.zero(dim), dim)


def hitting_time(x0: float, x1: float = 0.5) -> float:
    """int_{x0}^{x1} dx / (2 sin pi x), in closed form."""
    return float((np.log(np.tan(np.pi * x1 / 2)) - np.log(np.tan(np.pi * x0 / 2))) / (2 * np.pi))


def edge_x2(x20: float, t, eps: float = F4_EPS):
    """Solution of x2' = 2 pi eps cos(2 pi x2): sin(theta) = tanh(4 pi^2 eps t + atanh(sin theta0))."""
    th0 = 2 * np.pi * x20
    s = np.tanh(4 * np.pi ** 2 * eps * np.asarray(t, dtype=float) + np.arctanh(np.sin(th0)))
    return np.arcsin(s) / (2 * np.pi)


@dataclass(frozen=True)
class Fixture:
    name: str
    description: str
    model: HamiltonianModel
    phi: MinSmoothFn
    weak_kam: bool = False
    critical_value: float | None = None
    extras: dict = field(default_factory=dict)


def fixture(name: str) -> Fixture:
    name = name.upper()
    if name == "F1":
        return Fixture("F1", "free motion, phi = sin 2 pi x", free_model(), sine_phi(),
                       extras={"weak_kam_u": zero_phi()})
    if name == "F1U":
        return Fixture("F1U", "free motion, weak KAM u = 0", free_model(), zero_phi(),
                       weak_kam=True, critical_value=0.0)
    if name == "F2":
        return Fixture("F2", "free motion, phi = min(cos, -cos)", free_model(), kink_phi())
    if name == "F3":
        return Fixture("F3", "pendulum with its weak KAM solution", pendulum_model(), pendulum_u(),
                       weak_kam=True, critical_value=1.0)
    if name == "F4":
        return Fixture("F4", "2-D edge, phi = -|cos 2 pi x1| + 0.1 sin 2 pi x2", free_model(2), edge_phi())
    if name == "F5":
        return Fixture("F5", "quartic H over min(cos, -cos)", quartic_model(), kink_phi())
    raise KeyError(f"unknown fixture {name!r}")


FIXTURE_NAMES = ("F1", "F1U", "F2", "F3", "F4", "F5")

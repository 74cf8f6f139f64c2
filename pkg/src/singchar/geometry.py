"""Flat-torus arithmetic on R^d / Z^d for d = 1, 2.

Points are plain float arrays whose last axis holds the coordinates. Every
function accepts a single point of shape ``(d,)`` or a batch ``(..., d)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

SUPPORTED_DIMS = (1, 2)


def as_coords(x, dim=None) -> np.ndarray:
    """Return ``x`` as a float array with a trailing coordinate axis."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if dim is not None and arr.shape[-1] != dim:
        raise ValueError(f"expected {dim} coordinates, got shape {arr.shape}")
    if arr.shape[-1] not in SUPPORTED_DIMS:
        raise ValueError(f"torus dimension must be 1 or 2, got {arr.shape[-1]}")
    return arr


def reduce(x) -> np.ndarray:
    """Canonical representative in [0, 1)^d."""
    r = np.mod(as_coords(x), 1.0)
    # np.mod(-1e-18, 1.0) == 1.0
    return np.where(r >= 1.0, 0.0, r)


def torus_point(coords) -> np.ndarray:
    """Validated, reduced point."""
    arr = as_coords(coords)
    if not np.all(np.isfinite(arr)):
        raise ValueError("torus point must be finite")
    return reduce(arr)


def wrap_displacement(delta) -> np.ndarray:
    """Shift each component into (-1/2, 1/2]; ties go to +1/2."""
    delta = np.asarray(delta, dtype=float)
    return delta - np.ceil(delta - 0.5)


def nearest_lift(base, target) -> np.ndarray:
    """Lift of ``target`` closest to the canonical lift of ``base``."""
    b = reduce(base)
    return b + wrap_displacement(reduce(target) - b)


def torus_distance(a, b) -> np.ndarray | float:
    d = np.linalg.norm(wrap_displacement(as_coords(a) - as_coords(b)), axis=-1)
    return float(d) if np.ndim(d) == 0 else d


def lift_shifts(dim: int) -> np.ndarray:
    """The 3^d integer shifts, in lexicographic order."""
    return np.array(list(itertools.product((-1, 0, 1), repeat=dim)), dtype=float)


@dataclass(frozen=True)
class Grid:
    """Regular lattice {i/n : 0 <= i < n} on each axis."""

    resolution: tuple[int, ...]

    def __post_init__(self):
        res = tuple(int(n) for n in np.atleast_1d(self.resolution))
        if len(res) not in SUPPORTED_DIMS or min(res) < 1:
            raise ValueError(f"invalid grid resolution {self.resolution}")
        object.__setattr__(self, "resolution", res)

    @classmethod
    def uniform(cls, n: int, dim: int = 1) -> Grid:
        return cls((n,) * dim)

    @property
    def dim(self) -> int:
        return len(self.resolution)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.resolution

    @property
    def size(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def spacing(self) -> np.ndarray:
        return 1.0 / np.array(self.resolution, dtype=float)

    @cached_property
    def indices(self) -> np.ndarray:
        """Row-major integer multi-indices, shape (size, dim)."""
        axes = [np.arange(n) for n in self.resolution]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.indices / np.array(self.resolution, dtype=float)

    def flat_index(self, multi) -> np.ndarray:
        multi = np.mod(np.asarray(multi, dtype=int), self.resolution)
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), self.resolution)

    def nearest_node(self, x) -> np.ndarray:
        idx = np.rint(reduce(x) * np.array(self.resolution)).astype(int)
        return self.flat_index(idx)

"""Random measure ``M(dt, dx) = sigma dW_t delta_0(dx) + N~(dt, dx)`` and its
first two multiple integrals for simple (piecewise-constant) kernels.

The mark space is the finite set ``{0} U {jump nodes}``; mark 0 carries the
Brownian channel with ``mu({0}) = sigma^2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import GridError, KernelError, MarkError
from .levy import LevyModel, Path, PathBatch

__all__ = [
    "MeasureSpec",
    "Box",
    "Kernel1",
    "Kernel2",
    "m_integral",
    "integrate_M1",
    "integrate_M2",
    "symmetrized_norm_sq",
]


@dataclass(frozen=True, eq=False)
class MeasureSpec:
    """``mu = sigma^2 delta_0 + sum_j nu_j delta_{x_j}`` and ``m = Lebesgue x mu`` on ``[0, T]``."""

    sigma_sq: float
    marks: np.ndarray
    weights: np.ndarray
    horizon: float

    def __post_init__(self):
        marks = np.asarray(self.marks, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if marks.shape != weights.shape:
            raise MarkError("marks and weights differ in length")
        if self.sigma_sq < 0 or np.any(weights < 0):
            raise MarkError("measure weights must be >= 0")
        if np.any(marks == 0):
            raise MarkError("mark 0 is reserved for the Brownian channel")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_model(cls, model: LevyModel):
        marks, weights = model.nodes()
        return cls(model.sigma**2, marks, weights, model.horizon)

    @property
    def all_marks(self):
        return np.concatenate([[0.0], self.marks])

    @property
    def mu(self):
        return np.concatenate([[self.sigma_sq], self.weights])

    def total_mass(self):
        return self.horizon * float(self.mu.sum())

    def column(self, x):
        hit = np.flatnonzero(self.all_marks == x)
        if hit.size == 0:
            raise MarkError(f"mark {x} is not in the measure's support")
        return int(hit[0])


@dataclass(frozen=True)
class Box:
    """Rectangle ``(t0, t1] x marks`` of ``[0, T] x R``."""

    t0: float
    t1: float
    marks: tuple[float, ...]

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise KernelError(f"empty time interval ({self.t0}, {self.t1}]")
        object.__setattr__(self, "marks", tuple(float(x) for x in self.marks))

    def overlap(self, other):
        length = max(0.0, min(self.t1, other.t1) - max(self.t0, other.t0))
        common = sorted(set(self.marks) & set(other.marks))
        return length, common

    def m(self, spec: MeasureSpec):
        return (self.t1 - self.t0) * sum(spec.mu[spec.column(x)] for x in self.marks)


@dataclass(frozen=True, eq=False)
class Kernel1:
    """Order-1 simple kernel: ``values[c, k]`` on cell ``(breaks[c], breaks[c+1]]`` and mark column ``k``."""

    breaks: np.ndarray
    values: np.ndarray
    spec: MeasureSpec

    def __post_init__(self):
        breaks = np.asarray(self.breaks, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if breaks.ndim != 1 or np.any(np.diff(breaks) <= 0):
            raise KernelError("breaks must be strictly increasing")
        if values.shape != (breaks.size - 1, self.spec.all_marks.size):
            raise KernelError(f"values must have shape ({breaks.size - 1}, {self.spec.all_marks.size})")
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "values", values)

    order = 1

    @classmethod
    def indicator(cls, box: Box, spec: MeasureSpec):
        breaks = np.array([box.t0, box.t1])
        values = np.zeros((1, spec.all_marks.size))
        for x in box.marks:
            values[0, spec.column(x)] = 1.0
        return cls(breaks, values, spec)

    @classmethod
    def from_function(cls, breaks, spec: MeasureSpec, fn: Callable[[float, float], float]):
        breaks = np.asarray(breaks, dtype=float)
        values = np.array([[fn(t, x) for x in spec.all_marks] for t in breaks[:-1]])
        return cls(breaks, values, spec)

    def refine(self, n):
        """Split every cell into ``n`` equal parts, same values."""
        pieces = [np.linspace(a, b, n + 1)[:-1] for a, b in zip(self.breaks[:-1], self.breaks[1:])]
        breaks = np.concatenate(pieces + [self.breaks[-1:]])
        return Kernel1(breaks, np.repeat(self.values, n, axis=0), self.spec)

    def __add__(self, other):
        if not (np.array_equal(self.breaks, other.breaks) and other.spec is self.spec):
            raise KernelError("kernels on different partitions")
        return Kernel1(self.breaks, self.values + other.values, self.spec)

    def __rmul__(self, a):
        return Kernel1(self.breaks, a * self.values, self.spec)


@dataclass(frozen=True)
class Kernel2:
    """Order-2 simple kernel ``sum_k a_k 1_{B1_k} (x) 1_{B2_k}`` with ``B1_k``, ``B2_k`` disjoint."""

    terms: tuple[tuple[float, Box, Box], ...]
    spec: MeasureSpec

    order = 2

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        for k, (_, b1, b2) in enumerate(self.terms):
            length, common = b1.overlap(b2)
            if length > 0 and common:
                raise KernelError(f"term {k}: rectangles overlap on marks {common}")


def m_integral(kernel: Kernel1, spec: MeasureSpec | None = None, squared: bool = True) -> float:
    """``int f^2 dm`` (or ``int f dm`` with ``squared=False``) by exact cell sums."""
    if getattr(kernel, "order", None) != 1:
        raise KernelError("m_integral needs an order-1 kernel")
    spec = spec or kernel.spec
    if spec is not kernel.spec and not np.array_equal(spec.all_marks, kernel.spec.all_marks):
        raise MarkError("kernel marks do not match the measure")
    f = kernel.values**2 if squared else kernel.values
    return float(np.diff(kernel.breaks) @ f @ spec.mu)


def _grid_positions(grid, breaks):
    pos = np.searchsorted(grid, breaks)
    pos = np.clip(pos, 0, grid.size - 1)
    if not np.allclose(grid[pos], breaks, rtol=0, atol=1e-12 * max(1.0, grid[-1])):
        raise GridError("kernel breakpoints must lie on the path grid")
    return pos


def integrate_M1(kernel: Kernel1, paths, model: LevyModel | None = None) -> np.ndarray:
    """``I_1(f) = sigma sum f(t_i, 0) dW_i + sum_jumps f(s, x) - int int f dt nu(dx)``.

    Returns one value per path (a float for a single :class:`Path`).
    """
    if isinstance(paths, Path):
        return float(integrate_M1(kernel, paths.as_batch(), model)[0])
    batch: PathBatch = paths
    spec = kernel.spec
    if model is not None:
        marks, _ = model.nodes()
        if not np.array_equal(marks, spec.marks):
            raise MarkError("kernel marks do not match the model's jump support")
    pos = _grid_positions(batch.grid, kernel.breaks)
    W = batch.W
    out = batch.sigma * ((W[:, pos[1:]] - W[:, pos[:-1]]) @ kernel.values[:, 0])
    cell = np.searchsorted(kernel.breaks, batch.jump_time, side="left") - 1
    inside = (cell >= 0) & (cell < kernel.breaks.size - 1)
    if np.any(inside):
        sizes = batch.jump_size[inside]
        col = np.searchsorted(spec.marks, sizes)
        col = np.clip(col, 0, max(spec.marks.size - 1, 0))
        if spec.marks.size == 0 or np.any(spec.marks[col] != sizes):
            bad = sizes[(spec.marks.size == 0) | (spec.marks[col] != sizes)][0]
            raise MarkError(f"jump of size {bad} is not a mark of the kernel")
        np.add.at(out, batch.jump_path[inside], kernel.values[cell[inside], col + 1])
    comp = np.diff(kernel.breaks) @ kernel.values[:, 1:] @ spec.weights
    return out - comp


def integrate_M2(kernel: Kernel2, paths, model: LevyModel | None = None) -> np.ndarray:
    """``I_2(f) = sum_k a_k M(B1_k) M(B2_k)``."""
    if isinstance(paths, Path):
        return float(integrate_M2(kernel, paths.as_batch(), model)[0])
    out = np.zeros(paths.n_paths)
    cache = {}

    def M(box):
        if box not in cache:
            cache[box] = integrate_M1(Kernel1.indicator(box, kernel.spec), paths, model)
        return cache[box]

    for a, b1, b2 in kernel.terms:
        out += a * M(b1) * M(b2)
    return out


def _inner(b1, b2, c1, c2, spec):
    l1, m1 = b1.overlap(c1)
    l2, m2 = b2.overlap(c2)
    mu = lambda ms: sum(spec.mu[spec.column(x)] for x in ms)
    return l1 * mu(m1) * l2 * mu(m2)


def symmetrized_norm_sq(kernel: Kernel2) -> float:
    """``|f~|^2`` in ``L2(m x m)`` with ``f~`` the symmetrisation of ``f``."""
    spec = kernel.spec
    plain = swapped = 0.0
    for a, b1, b2 in kernel.terms:
        for c, c1, c2 in kernel.terms:
            plain += a * c * _inner(b1, b2, c1, c2, spec)
            swapped += a * c * _inner(b1, b2, c2, c1, spec)
    return 0.5 * (plain + swapped)

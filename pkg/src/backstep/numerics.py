"""Uniform-grid functions on [0, 1] and the quadratures shared by every module.

Convolutions use the left-rectangle rule so that Volterra equations built on
them can be marched explicitly. Norms use the trapezoidal rule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class GridMismatchError(ValueError):
    """Two grid functions that must share a grid do not."""


@dataclass(frozen=True)
class Grid1D:
    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ValueError(f"n_points must be an integer >= 2, got {self.n_points!r}")

    @classmethod
    def from_dx(cls, dx: float) -> "Grid1D":
        if not 0 < dx <= 1:
            raise ValueError(f"dx must lie in (0, 1], got {dx}")
        n = int(round(1.0 / dx)) + 1
        if n < 2 or abs((n - 1) * dx - 1.0) > 1e-9:
            raise ValueError(f"dx={dx} does not divide [0, 1] evenly")
        return cls(n)

    @property
    def dx(self) -> float:
        return 1.0 / (self.n_points - 1)

    @cached_property
    def x(self) -> np.ndarray:
        x = np.arange(self.n_points) * self.dx
        x[-1] = 1.0
        x.setflags(write=False)
        return x


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Samples of a real function at every node of a :class:`Grid1D`."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != (self.grid.n_points,):
            raise ValueError(
                f"expected {self.grid.n_points} values, got array of shape {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, grid: Grid1D, f) -> "GridFunction":
        return cls(grid, np.broadcast_to(f(grid.x), (grid.n_points,)))

    @classmethod
    def constant(cls, grid: Grid1D, c: float) -> "GridFunction":
        return cls(grid, np.full(grid.n_points, float(c)))

    @classmethod
    def zeros(cls, grid: Grid1D) -> "GridFunction":
        return cls(grid, np.zeros(grid.n_points))

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    def _other(self, other):
        if isinstance(other, GridFunction):
            _check_same_grid(self, other)
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.grid, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - self._other(other))

    def __rsub__(self, other):
        return GridFunction(self.grid, self._other(other) - self.values)

    def __mul__(self, other):
        return GridFunction(self.grid, self.values * self._other(other))

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.grid, -self.values)

    def __len__(self):
        return self.grid.n_points

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "value"])
            for xi, vi in zip(self.grid.x, self.values):
                writer.writerow([repr(float(xi)), repr(float(vi))])

    @classmethod
    def from_csv(cls, path) -> "GridFunction":
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["x", "value"]:
            raise ValueError(f"{path}: expected header 'x,value'")
        values = [float(r[1]) for r in rows[1:]]
        return cls(Grid1D(len(values)), np.asarray(values))


def _check_same_grid(a: GridFunction, b: GridFunction) -> None:
    if a.grid != b.grid:
        raise GridMismatchError(
            f"grid mismatch: {a.grid.n_points} vs {b.grid.n_points} points"
        )


# Array-level kernels. The closed loop calls these directly to avoid
# re-validating the same arrays thousands of times per run.


def convolve_arrays(a: np.ndarray, b: np.ndarray, dx: float) -> np.ndarray:
    # c_i = dx * sum_{j<i} a_{i-j} b_j
    n = a.shape[0]
    full = np.convolve(a, b)[:n]
    return dx * (full - a[0] * b)


def trapezoid_arrays(f: np.ndarray, dx: float) -> float:
    return float(dx * (f.sum() - 0.5 * (f[0] + f[-1])))


def weighted_norm_sq_arrays(w: np.ndarray, weight: np.ndarray, dx: float) -> float:
    return trapezoid_arrays(weight * w * w, dx)


# Public operations on grid functions.


def convolve(a: GridFunction, b: GridFunction) -> GridFunction:
    """Left-rectangle approximation of ``(a * b)(x) = int_0^x a(x - y) b(y) dy``."""
    _check_same_grid(a, b)
    return GridFunction(a.grid, convolve_arrays(a.values, b.values, a.grid.dx))


def integrate(f: GridFunction) -> float:
    return trapezoid_arrays(f.values, f.grid.dx)


def weighted_norm_sq(w: GridFunction, c: float) -> float:
    """Trapezoidal ``int_0^1 exp(c x) w(x)^2 dx``."""
    if c < 0:
        raise ValueError(f"weight exponent c must be nonnegative, got {c}")
    return weighted_norm_sq_arrays(w.values, np.exp(c * w.grid.x), w.grid.dx)


def l2_norm(f: GridFunction) -> float:
    return float(np.sqrt(max(trapezoid_arrays(f.values * f.values, f.grid.dx), 0.0)))


def sup_norm(f: GridFunction) -> float:
    return float(np.max(np.abs(f.values)))


def resample(f: GridFunction, grid: Grid1D) -> GridFunction:
    """Linear interpolation of ``f`` onto another uniform grid."""
    if f.grid == grid:
        return f
    return GridFunction(grid, np.interp(grid.x, f.grid.x, f.values))

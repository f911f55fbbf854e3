"""Backstepping kernel machinery for convolution-type Volterra equations.

The gain kernel ``k = K(beta)`` is the solution of

    k(x) = -beta(x) + int_0^x beta(x - y) k(y) dy,

discretised with the same left-rectangle rule as
:func:`backstep.numerics.convolve`, so the marching solve is explicit and
satisfies the discrete equation to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .numerics import (
    GridFunction,
    _check_same_grid,
    convolve,
    convolve_arrays,
    sup_norm,
)


class SeriesNotConverged(RuntimeError):
    def __init__(self, terms: int, last_term_sup: float):
        super().__init__(
            f"successive approximation did not converge in {terms} terms "
            f"(last term sup-norm {last_term_sup:.3e})"
        )
        self.terms = terms
        self.last_term_sup = last_term_sup


class SeriesBoundViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelSolveReport:
    kernel: GridFunction
    residual_sup: float
    iterations: int


@numba.njit(cache=True)
def _march(a, f, dx):
    # xi_i = f_i + dx * sum_{j<i} a_{i-j} xi_j
    n = a.shape[0]
    xi = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(i):
            s += a[i - j] * xi[j]
        xi[i] = f[i] + dx * s
    return xi


def kernel_arrays(beta_hat: np.ndarray, dx: float) -> np.ndarray:
    """Bare marching solve of the kernel equation on raw arrays."""
    b = np.ascontiguousarray(beta_hat, dtype=np.float64)
    return _march(b, -b, dx)


def exact_kernel(beta_hat: GridFunction) -> GridFunction:
    """The operator ``K``: gain kernel of ``beta_hat`` without diagnostics."""
    return GridFunction(beta_hat.grid, kernel_arrays(beta_hat.values, beta_hat.grid.dx))


def kernel_residual(beta_hat: GridFunction, kernel: GridFunction) -> float:
    """sup-norm of ``k + beta_hat - beta_hat * k`` on the grid."""
    return sup_norm(kernel + beta_hat - convolve(beta_hat, kernel))


def backstepping_B(xi: GridFunction, eta: GridFunction) -> GridFunction:
    """``B(xi, eta) = xi - eta * xi``."""
    _check_same_grid(xi, eta)
    return xi - convolve(eta, xi)


def solve_kernel(beta_hat: GridFunction) -> KernelSolveReport:
    kernel = exact_kernel(beta_hat)
    return KernelSolveReport(kernel, kernel_residual(beta_hat, kernel), 0)


def solve_kernel_series(
    beta_hat: GridFunction, max_terms: int = 200, tol: float = 1e-12
) -> KernelSolveReport:
    """Kernel as the Neumann series ``sum_n dk_n`` with ``dk_0 = -beta_hat``
    and ``dk_{n+1} = beta_hat * dk_n``.

    Each term is checked against ``|dk_n(x)| <= B^{n+1} x^n / n!`` with
    ``B = sup|beta_hat|``; the left-rectangle rule preserves this bound
    exactly because it under-integrates increasing monomials.
    """
    if max_terms < 1:
        raise ValueError("max_terms must be >= 1")
    grid = beta_hat.grid
    b = beta_hat.values
    B = float(np.max(np.abs(b)))
    x = grid.x
    term = -b.copy()
    total = np.zeros_like(b)
    for n in range(max_terms):
        bound = _series_term_bound(B, x, n)
        if np.any(np.abs(term) > bound * (1 + 1e-9) + 1e-300):
            raise SeriesBoundViolation(f"term {n} exceeds B^(n+1) x^n / n!")
        total += term
        size = float(np.max(np.abs(term)))
        if size < tol:
            kernel = GridFunction(grid, total)
            return KernelSolveReport(kernel, kernel_residual(beta_hat, kernel), n + 1)
        term = convolve_arrays(b, term, grid.dx)
    raise SeriesNotConverged(max_terms, size)


def _series_term_bound(B: float, x: np.ndarray, n: int) -> np.ndarray:
    if n == 0:
        return np.full_like(x, B)
    if B == 0.0:
        return np.zeros_like(x)
    with np.errstate(divide="ignore"):
        log_bound = (n + 1) * math.log(B) + n * np.log(x) - math.lgamma(n + 1)
    return np.exp(log_bound)


def involution_apply(beta: GridFunction) -> GridFunction:
    """``K(K(beta))``, which recovers ``beta`` up to quadrature error."""
    return exact_kernel(exact_kernel(beta))


def solve_W(zeta: GridFunction, eta: GridFunction) -> GridFunction:
    """Solution ``xi`` of ``B(xi, eta) = zeta``, namely ``B(zeta, K(eta))``."""
    _check_same_grid(zeta, eta)
    return backstepping_B(zeta, exact_kernel(eta))


def kernel_time_derivative(beta0: GridFunction, beta1: GridFunction) -> GridFunction:
    """The operator ``K1``: directional derivative of ``K`` at ``beta0`` along ``beta1``.

    Explicitly ``-b1 + 2 b1*k0 - b1*k0*k0`` with ``k0 = K(beta0)``.
    """
    _check_same_grid(beta0, beta1)
    k0 = exact_kernel(beta0)
    b1k0 = convolve(beta1, k0)
    return -beta1 + 2.0 * b1k0 - convolve(b1k0, k0)


def k1_residual(beta0: GridFunction, beta1: GridFunction, k1: GridFunction) -> float:
    """sup-norm residual of ``k1 - b0*k1 + b1 - b1*k0 = 0``."""
    k0 = exact_kernel(beta0)
    return sup_norm(k1 - convolve(beta0, k1) + beta1 - convolve(beta1, k0))

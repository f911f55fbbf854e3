"""Adaptive update laws for the recirculation coefficient estimate.

Two designs share the projection operator and Euler integration:

* Lyapunov: normalised gradient of the weighted target-state energy.
* Passive identifier: gradient of the observer error ``u - u_hat``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import (
    GridFunction,
    _check_same_grid,
    convolve_arrays,
    trapezoid_arrays,
    weighted_norm_sq_arrays,
)


class ProjectionContractError(ValueError):
    """Estimate handed to the projector lies outside ``[-B, B]``."""


@dataclass(frozen=True)
class LyapunovConfig:
    gamma: float = 1e-2
    c: float = 1.0
    B: float = 5.0

    def __post_init__(self):
        for name in ("gamma", "c", "B"):
            if not getattr(self, name) > 0:
                raise ValueError(f"LyapunovConfig.{name} must be positive")


@dataclass(frozen=True)
class PassiveConfig:
    gamma: float = 1.0
    gamma0: float = 1.0
    B: float = 5.0

    def __post_init__(self):
        for name in ("gamma", "gamma0", "B"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PassiveConfig.{name} must be positive")


@dataclass
class AdaptiveLoopState:
    t: float
    u: GridFunction
    beta_hat: GridFunction
    u_hat: Optional[GridFunction] = None


@dataclass(frozen=True)
class Diagnostics:
    V: float
    Gamma_state: float
    S: float
    w_norm_c_sq: float


def control_U(kernel: GridFunction, state: GridFunction) -> float:
    """Boundary input ``int_0^1 k(1 - y) state(y) dy`` (trapezoidal)."""
    _check_same_grid(kernel, state)
    return trapezoid_arrays(kernel.values[::-1] * state.values, kernel.grid.dx)


def transform_w(u: GridFunction, kernel: GridFunction) -> GridFunction:
    """Backstepping transform ``w = u - k * u``."""
    _check_same_grid(u, kernel)
    return GridFunction(u.grid, u.values - convolve_arrays(kernel.values, u.values, u.grid.dx))


def tail_correlation(k: np.ndarray, g: np.ndarray, dx: float) -> np.ndarray:
    """Trapezoidal ``I(x_i) = int_{x_i}^1 k(y - x_i) g(y) dy`` for every node."""
    n = k.shape[0]
    s = np.convolve(g[::-1], k)[:n][::-1]
    return dx * (s - 0.5 * (k[0] * g + k[::-1] * g[-1]))


def tau_lyapunov_arrays(
    w: np.ndarray, k: np.ndarray, x: np.ndarray, dx: float, cfg: LyapunovConfig
) -> np.ndarray:
    ecx = np.exp(cfg.c * x)
    norm = weighted_norm_sq_arrays(w, ecx, dx)
    g = ecx * w
    return cfg.gamma / (1.0 + norm) * (g - tail_correlation(k, g, dx)) * w[0]


def tau_lyapunov(w: GridFunction, kernel: GridFunction, cfg: LyapunovConfig) -> GridFunction:
    _check_same_grid(w, kernel)
    return GridFunction(
        w.grid, tau_lyapunov_arrays(w.values, kernel.values, w.grid.x, w.grid.dx, cfg)
    )


def proj(a: float, b: float, B: float) -> float:
    """Zero the update when it would push ``b`` past the bound ``|b| = B``."""
    if abs(b) > B:
        raise ProjectionContractError(f"|{b}| exceeds projection bound {B}")
    if abs(b) == B and a * b > 0:
        return 0.0
    return a


def proj_arrays(a: np.ndarray, b: np.ndarray, B: float) -> np.ndarray:
    if np.any(np.abs(b) > B):
        raise ProjectionContractError(f"estimate leaves [-{B}, {B}]")
    return np.where((np.abs(b) >= B) & (a * b > 0), 0.0, a)


def projected_euler(beta_hat: np.ndarray, tau: np.ndarray, B: float, dt: float) -> np.ndarray:
    # The clamp keeps the invariant under finite dt; the projector alone
    # only stops motion once the bound is reached exactly.
    return np.clip(beta_hat + dt * proj_arrays(tau, beta_hat, B), -B, B)


def update_beta_lyapunov(
    state: AdaptiveLoopState, kernel: GridFunction, cfg: LyapunovConfig, dt: float
) -> GridFunction:
    grid = state.u.grid
    w = transform_w(state.u, kernel)
    tau = tau_lyapunov_arrays(w.values, kernel.values, grid.x, grid.dx, cfg)
    return GridFunction(grid, projected_euler(state.beta_hat.values, tau, cfg.B, dt))


def tau_passive(u: GridFunction, u_hat: GridFunction, cfg: PassiveConfig) -> GridFunction:
    _check_same_grid(u, u_hat)
    return GridFunction(u.grid, cfg.gamma * (u.values - u_hat.values) * u.values[0])


def update_beta_passive(
    beta_hat: GridFunction, tau: GridFunction, B: float, dt: float
) -> GridFunction:
    _check_same_grid(beta_hat, tau)
    return GridFunction(beta_hat.grid, projected_euler(beta_hat.values, tau.values, B, dt))


def diagnostics(
    state: AdaptiveLoopState,
    beta_true: GridFunction,
    kernel: GridFunction,
    cfg,
) -> Diagnostics:
    """Lyapunov functional V, Gamma = |u|^2 + |beta_tilde|^2 and
    S = |u|^2 + |u_hat|^2 + |beta_tilde|^2.

    ``cfg`` supplies ``gamma`` and, for the Lyapunov design, ``c``; a config
    without ``c`` uses the unweighted norm.
    """
    grid = state.u.grid
    dx = grid.dx
    c = getattr(cfg, "c", 0.0)
    u = state.u.values
    w = u - convolve_arrays(kernel.values, u, dx)
    w_norm = weighted_norm_sq_arrays(w, np.exp(c * grid.x), dx)
    bt = beta_true.values - state.beta_hat.values
    bt_sq = trapezoid_arrays(bt * bt, dx)
    u_sq = trapezoid_arrays(u * u, dx)
    uh_sq = 0.0
    if state.u_hat is not None:
        uh_sq = trapezoid_arrays(state.u_hat.values**2, dx)
    V = 0.5 * math.log1p(w_norm) + bt_sq / (2.0 * cfg.gamma)
    return Diagnostics(V=V, Gamma_state=u_sq + bt_sq, S=u_sq + uh_sq + bt_sq, w_norm_c_sq=w_norm)

"""Upwind simulation of the transport PDE with recirculation,

    u_t = u_x + beta(x) u(0, t),   u(1, t) = U(t),

its passive observer, and the closed-loop driver.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import adaptive
from .adaptive import AdaptiveLoopState, LyapunovConfig, PassiveConfig
from .numerics import (
    Grid1D,
    GridFunction,
    _check_same_grid,
    convolve_arrays,
    trapezoid_arrays,
)
from .volterra import exact_kernel

KernelOperator = Callable[[GridFunction], GridFunction]

BLOWUP_THRESHOLD = 1e12


class ConfigError(ValueError):
    pass


class BlowUpError(RuntimeError):
    """State exceeded :data:`BLOWUP_THRESHOLD`.

    ``trajectory`` holds every sample taken so far plus the last finite state.
    """

    def __init__(self, t: float, trajectory: "Trajectory", last_state: AdaptiveLoopState):
        super().__init__(f"numerical blow-up at t={t:.4f}")
        self.t = t
        self.trajectory = trajectory
        self.last_state = last_state


def chebyshev_beta(grid: Grid1D, sigma: float, amplitude: float = 5.0) -> GridFunction:
    """``amplitude * cos(sigma * arccos(x))``."""
    return GridFunction(grid, amplitude * np.cos(sigma * np.arccos(grid.x)))


@dataclass(frozen=True)
class PlantConfig:
    grid: Grid1D
    dt: float
    beta: GridFunction
    u0: GridFunction
    B: float = 5.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.dt > self.grid.dx * (1 + 1e-12):
            raise ConfigError(
                f"CFL violated: dt={self.dt} exceeds dx={self.grid.dx}"
            )
        if self.beta.grid != self.grid or self.u0.grid != self.grid:
            raise ConfigError("beta and u0 must live on the plant grid")
        if not self.B > 0:
            raise ConfigError("B must be positive")
        if np.max(np.abs(self.beta.values)) > self.B * (1 + 1e-12):
            raise ConfigError(f"sup|beta| exceeds the declared bound B={self.B}")


def _upwind(v: np.ndarray, src: np.ndarray, boundary: float, lam: float, dt: float) -> np.ndarray:
    out = np.empty_like(v)
    out[:-1] = v[:-1] + lam * (v[1:] - v[:-1]) + dt * src[:-1]
    out[-1] = boundary
    return out


def step_plant(u: GridFunction, U: float, beta: GridFunction, dt: float) -> GridFunction:
    """One explicit upwind step; the inflow value ``U`` is set after the update."""
    _check_same_grid(u, beta)
    lam = dt / u.grid.dx
    return GridFunction(u.grid, _upwind(u.values, beta.values * u.values[0], U, lam, dt))


def step_observer(
    u_hat: GridFunction,
    u: GridFunction,
    U: float,
    beta_hat: GridFunction,
    gamma0: float,
    dt: float,
) -> GridFunction:
    """Upwind step of ``u_hat_t = u_hat_x + beta_hat u(0) + gamma0 (u - u_hat) u(0)^2``."""
    _check_same_grid(u_hat, u)
    _check_same_grid(u_hat, beta_hat)
    u0 = u.values[0]
    src = beta_hat.values * u0 + gamma0 * (u.values - u_hat.values) * u0 * u0
    lam = dt / u.grid.dx
    return GridFunction(u.grid, _upwind(u_hat.values, src, U, lam, dt))


@dataclass(frozen=True)
class ControllerSpec:
    """Which feedback to close the loop with.

    ``kind`` is ``"open-loop"`` (U = 0), ``"lyapunov"`` or ``"passive"``.
    ``kernel`` maps the current estimate to the gain kernel in use.
    """

    kind: str = "lyapunov"
    kernel: KernelOperator = exact_kernel
    lyapunov: LyapunovConfig = field(default_factory=LyapunovConfig)
    passive: PassiveConfig = field(default_factory=PassiveConfig)
    beta_hat0: Optional[GridFunction] = None
    u_hat0: Optional[GridFunction] = None

    def __post_init__(self):
        if self.kind not in ("open-loop", "lyapunov", "passive"):
            raise ConfigError(f"unknown controller kind {self.kind!r}")

    @property
    def gains(self):
        return self.passive if self.kind == "passive" else self.lyapunov

    @property
    def B(self) -> float:
        return self.gains.B


SCALAR_COLUMNS = ("t", "U", "u_l2", "w_norm_c", "V", "Gamma")


@dataclass
class Trajectory:
    grid: Grid1D
    t: list = field(default_factory=list)
    u: list = field(default_factory=list)
    beta_hat: list = field(default_factory=list)
    kernel: list = field(default_factory=list)
    u_hat: list = field(default_factory=list)
    U: list = field(default_factory=list)
    u_l2: list = field(default_factory=list)
    w_norm_c: list = field(default_factory=list)
    V: list = field(default_factory=list)
    Gamma: list = field(default_factory=list)
    S: list = field(default_factory=list)

    def __len__(self):
        return len(self.t)

    def field_array(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name))

    def write_csv(self, outdir) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        header = ["t"] + [repr(float(x)) for x in self.grid.x]
        written = []
        for name in ("u", "beta_hat", "kernel"):
            path = outdir / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                for t, row in zip(self.t, getattr(self, name)):
                    writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])
            written.append(path)
        path = outdir / "scalars.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SCALAR_COLUMNS)
            for row in zip(self.t, self.U, self.u_l2, self.w_norm_c, self.V, self.Gamma):
                writer.writerow([repr(float(v)) for v in row])
        written.append(path)
        return written


def run_closed_loop(
    config: PlantConfig,
    controller: ControllerSpec,
    T: float,
    sample_every: float,
) -> Trajectory:
    """Simulate to time ``T``, sampling at ``t = 0, sample_every, ...`` and at ``T``.

    Every step: kernel from the current estimate, boundary input from the
    current state, explicit plant (and observer) step, projected Euler update
    of the estimate. Raises :class:`BlowUpError` once the state's sup-norm
    exceeds :data:`BLOWUP_THRESHOLD`.
    """
    if not T > 0:
        raise ConfigError("T must be positive")
    dt = config.dt
    if sample_every < dt * (1 - 1e-9):
        raise ConfigError("sample_every must be at least dt")
    grid = config.grid
    dx = grid.dx
    x = grid.x
    lam = dt / dx
    n_steps = int(round(T / dt))
    stride = max(1, int(round(sample_every / dt)))
    kind = controller.kind
    gains = controller.gains
    B = gains.B

    beta = config.beta.values
    u = config.u0.values.copy()
    if controller.beta_hat0 is not None:
        bh = controller.beta_hat0.values.copy()
    else:
        bh = np.ones(grid.n_points)
    if np.any(np.abs(bh) > B):
        raise ConfigError(f"initial estimate leaves [-{B}, {B}]")
    uh = None
    if kind == "passive":
        uh = (controller.u_hat0 if controller.u_hat0 is not None else config.u0).values.copy()

    traj = Trajectory(grid)
    beta_true = config.beta

    def kernel_of(bh_arr):
        if kind == "open-loop":
            return np.zeros(grid.n_points)
        return controller.kernel(GridFunction(grid, bh_arr)).values

    def record(t, u, bh, uh, k, U):
        state = AdaptiveLoopState(
            t, GridFunction(grid, u), GridFunction(grid, bh),
            None if uh is None else GridFunction(grid, uh),
        )
        d = adaptive.diagnostics(state, beta_true, GridFunction(grid, k), gains)
        traj.t.append(t)
        traj.u.append(u.copy())
        traj.beta_hat.append(bh.copy())
        traj.kernel.append(k.copy())
        if uh is not None:
            traj.u_hat.append(uh.copy())
        traj.U.append(U)
        traj.u_l2.append(math.sqrt(trapezoid_arrays(u * u, dx)))
        traj.w_norm_c.append(math.sqrt(d.w_norm_c_sq))
        traj.V.append(d.V)
        traj.Gamma.append(d.Gamma_state)
        traj.S.append(d.S)

    for step in range(n_steps + 1):
        t = step * dt
        k = kernel_of(bh)
        if kind == "open-loop":
            U = 0.0
        elif kind == "lyapunov":
            U = trapezoid_arrays(k[::-1] * u, dx)
        else:
            U = trapezoid_arrays(k[::-1] * uh, dx)
        sampled = step % stride == 0 or step == n_steps
        if sampled:
            record(t, u, bh, uh, k, U)
        if step == n_steps:
            break

        u0 = u[0]
        uh_next = None
        if kind == "lyapunov":
            w = u - convolve_arrays(k, u, dx)
            tau = adaptive.tau_lyapunov_arrays(w, k, x, dx, gains)
        elif kind == "passive":
            tau = gains.gamma * (u - uh) * u0
            uh_next = _upwind(uh, bh * u0 + gains.gamma0 * (u - uh) * u0 * u0, U, lam, dt)
        u_next = _upwind(u, beta * u0, U, lam, dt)

        if _blown(u_next) or (uh_next is not None and _blown(uh_next)):
            if not sampled:
                record(t, u, bh, uh, k, U)
            last = AdaptiveLoopState(
                t, GridFunction(grid, u), GridFunction(grid, bh),
                None if uh is None else GridFunction(grid, uh),
            )
            raise BlowUpError(t + dt, traj, last)
        if kind != "open-loop":
            bh = adaptive.projected_euler(bh, tau, B, dt)
        u = u_next
        uh = uh_next
    return traj


def _blown(v: np.ndarray) -> bool:
    m = np.max(np.abs(v))
    return not (m <= BLOWUP_THRESHOLD)

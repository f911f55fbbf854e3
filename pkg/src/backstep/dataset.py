"""Supervised (estimate, kernel) pairs harvested from exact adaptive runs.

Each run draws ``sigma ~ Uniform(sigma_low, sigma_high)``, sets the plant
coefficient to the Chebyshev profile ``amplitude * cos(sigma arccos x)``, closes
the loop with the exact-kernel Lyapunov controller and records
``(beta_hat(., t), K(beta_hat(., t)))`` every ``subsample`` seconds.

``.kds`` layout (all little-endian)::

    header   magic "KDS1", u16 version, u32 m, u32 n_points, u64 count,
             i64 seed, f64 dx, dt, gamma, c, B, amplitude
    sensors  m x f64
    records  count x (run_id, sigma, t, blown, beta_hat[m], kernel[n]) as f64
    crc32    u32 over everything above
"""

from __future__ import annotations

import csv
import logging
import os
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .adaptive import LyapunovConfig
from .deeponet import make_rng
from .numerics import Grid1D, GridFunction
from .plant import BlowUpError, ControllerSpec, PlantConfig, chebyshev_beta, run_closed_loop
from .volterra import kernel_arrays, kernel_residual

log = logging.getLogger(__name__)

MAGIC = b"KDS1"
VERSION = 1
_HEADER = struct.Struct("<4sHxxIIQqdddddd")


class DatasetFormatError(ValueError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass
class KernelDataset:
    sensors: np.ndarray
    n_points: int
    beta_hat: np.ndarray
    kernels: np.ndarray
    run_ids: np.ndarray
    sigmas: np.ndarray
    times: np.ndarray
    blown: np.ndarray
    seed: int = 0
    dx: float = 0.01
    dt: float = 5e-3
    gamma: float = 1e-2
    c: float = 1.0
    B: float = 5.0
    amplitude: float = 5.0

    def __len__(self):
        return self.beta_hat.shape[0]

    @property
    def m(self) -> int:
        return self.sensors.size

    def keys(self) -> list:
        return list(zip(self.run_ids.tolist(), np.round(self.times / self.dt).astype(int).tolist()))

    def residual_check(self, fraction: float = 0.01, seed: int = 0) -> float:
        """Largest Volterra residual over a random ``fraction`` of samples,
        relative to the quadrature allowance ``10 dx (1 + B e^B)``."""
        grid = Grid1D(self.n_points)
        count = max(1, int(round(fraction * len(self))))
        idx = make_rng(seed).choice(len(self), size=count, replace=False)
        worst = 0.0
        for i in idx:
            bh = GridFunction(grid, np.interp(grid.x, self.sensors, self.beta_hat[i]))
            B = float(np.max(np.abs(bh.values)))
            res = kernel_residual(bh, GridFunction(grid, self.kernels[i]))
            worst = max(worst, res / (10 * grid.dx * (1 + B * np.exp(B))))
        return worst


def _run_one(args):
    run_id, sigma, T, subsample, dx, dt, gamma, c, B, amplitude, u0, beta_hat0 = args
    grid = Grid1D.from_dx(dx)
    plant = PlantConfig(
        grid, dt, chebyshev_beta(grid, sigma, amplitude), GridFunction.constant(grid, u0), B
    )
    ctrl = ControllerSpec(
        "lyapunov",
        lyapunov=LyapunovConfig(gamma=gamma, c=c, B=B),
        beta_hat0=GridFunction.constant(grid, beta_hat0),
    )
    blown = False
    try:
        traj = run_closed_loop(plant, ctrl, T, subsample)
    except BlowUpError as exc:
        traj = exc.trajectory
        blown = True
    t = np.asarray(traj.t)
    keep = t < T - 0.5 * dt
    return (
        run_id, sigma, t[keep],
        np.asarray(traj.beta_hat)[keep].reshape(-1, grid.n_points),
        np.asarray(traj.kernel)[keep].reshape(-1, grid.n_points),
        blown,
    )


def worker_cap() -> int:
    env = os.environ.get("BACKSTEP_NO_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def generate(
    n_runs: int = 10,
    sigma_low: float = 2.7,
    sigma_high: float = 3.2,
    T: float = 10.0,
    subsample: float = 0.01,
    seed: int = 0,
    *,
    dx: float = 0.01,
    dt: float = 5e-3,
    gamma: float = 1e-2,
    c: float = 1.0,
    B: float = 5.0,
    amplitude: float = 5.0,
    u0: float = 1.0,
    beta_hat0: float = 1.0,
    workers: Optional[int] = None,
) -> KernelDataset:
    if not sigma_low < sigma_high:
        raise ValueError("sigma_low must be below sigma_high")
    if not T > 0:
        raise ValueError("T must be positive")
    if subsample < dt * (1 - 1e-9):
        raise ValueError("subsample must be at least dt")
    sigmas = make_rng(seed).uniform(sigma_low, sigma_high, size=n_runs)
    jobs = [
        (r, float(s), T, subsample, dx, dt, gamma, c, B, amplitude, u0, beta_hat0)
        for r, s in enumerate(sigmas)
    ]
    workers = min(workers or worker_cap(), worker_cap(), max(n_runs, 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    grid = Grid1D.from_dx(dx)
    cols = {k: [] for k in ("run", "sigma", "t", "bh", "k", "blown")}
    for run_id, sigma, t, bh, k, blown in results:
        if blown:
            log.warning("run %d (sigma=%.4f) blew up; %d samples flagged", run_id, sigma, len(t))
        cols["run"].append(np.full(len(t), run_id))
        cols["sigma"].append(np.full(len(t), sigma))
        cols["t"].append(t)
        cols["bh"].append(bh)
        cols["k"].append(k)
        cols["blown"].append(np.full(len(t), blown))
    cat = {k: np.concatenate(v) if v else np.empty(0) for k, v in cols.items()}
    n = grid.n_points
    return KernelDataset(
        sensors=grid.x.copy(),
        n_points=n,
        beta_hat=cat["bh"].reshape(-1, n),
        kernels=cat["k"].reshape(-1, n),
        run_ids=cat["run"].astype(np.int64),
        sigmas=cat["sigma"].astype(np.float64),
        times=cat["t"].astype(np.float64),
        blown=cat["blown"].astype(bool),
        seed=seed, dx=dx, dt=dt, gamma=gamma, c=c, B=B, amplitude=amplitude,
    )


def reconstruct_sample(ds: KernelDataset, index: int, u0: float = 1.0, beta_hat0: float = 1.0):
    """Re-run sample ``index``'s run up to its time stamp; returns ``(beta_hat, kernel)``."""
    t = float(ds.times[index])
    grid = Grid1D(ds.n_points)
    plant = PlantConfig(
        grid, ds.dt, chebyshev_beta(grid, float(ds.sigmas[index]), ds.amplitude),
        GridFunction.constant(grid, u0), ds.B,
    )
    ctrl = ControllerSpec(
        "lyapunov",
        lyapunov=LyapunovConfig(gamma=ds.gamma, c=ds.c, B=ds.B),
        beta_hat0=GridFunction.constant(grid, beta_hat0),
    )
    if t == 0:
        bh = ctrl.beta_hat0.values
    else:
        bh = run_closed_loop(plant, ctrl, t, t).beta_hat[-1]
    return bh, kernel_arrays(bh, grid.dx)


def save(ds: KernelDataset, path) -> None:
    header = _HEADER.pack(
        MAGIC, VERSION, ds.m, ds.n_points, len(ds), int(ds.seed),
        ds.dx, ds.dt, ds.gamma, ds.c, ds.B, ds.amplitude,
    )
    meta = np.column_stack([ds.run_ids, ds.sigmas, ds.times, ds.blown]).astype(np.float64)
    records = np.hstack([meta.reshape(len(ds), 4), ds.beta_hat, ds.kernels])
    body = header + np.ascontiguousarray(ds.sensors, "<f8").tobytes()
    body += np.ascontiguousarray(records, "<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load(path) -> KernelDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than header")
    magic, version, m, n, count, seed, dx, dt, gamma, c, B, amp = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, reader supports {VERSION}")
    width = 4 + m + n
    expected = _HEADER.size + 8 * (m + count * width) + 4
    if len(buf) < expected:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes, expected {expected}")
    if len(buf) > expected:
        raise DatasetFormatError(f"{path}: {len(buf) - expected} trailing bytes")
    body = buf[:-4]
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: CRC-32 mismatch")
    flat = np.frombuffer(body, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    sensors = flat[:m].copy()
    rec = flat[m:].reshape(count, width)
    return KernelDataset(
        sensors=sensors,
        n_points=n,
        beta_hat=rec[:, 4:4 + m].copy(),
        kernels=rec[:, 4 + m:].copy(),
        run_ids=rec[:, 0].astype(np.int64),
        sigmas=rec[:, 1].copy(),
        times=rec[:, 2].copy(),
        blown=rec[:, 3] != 0,
        seed=seed, dx=dx, dt=dt, gamma=gamma, c=c, B=B, amplitude=amp,
    )


def export_csv(ds: KernelDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["run_id", "sigma", "t", "blown"]
            + [f"beta_hat_{i}" for i in range(ds.m)]
            + [f"kernel_{i}" for i in range(ds.n_points)]
        )
        for i in range(len(ds)):
            writer.writerow(
                [int(ds.run_ids[i]), repr(float(ds.sigmas[i])), repr(float(ds.times[i])),
                 int(ds.blown[i])]
                + [repr(float(v)) for v in ds.beta_hat[i]]
                + [repr(float(v)) for v in ds.kernels[i]]
            )

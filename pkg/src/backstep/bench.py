"""Wall-clock comparison of the marching kernel solve and neural inference."""

from __future__ import annotations

import csv
import gc
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .deeponet import DeepOnetModel, NeuralKernel
from .numerics import Grid1D, GridFunction
from .volterra import exact_kernel

WARMUP_CALLS = 3


class BenchGateError(RuntimeError):
    """Neural and exact kernels disagree before timing starts."""


@dataclass(frozen=True)
class BenchResult:
    dx: float
    analytic_mean_s: float
    analytic_stddev_s: float
    no_mean_s: float
    no_stddev_s: float
    speedup: float
    n_repeats: int
    gate_rel_l2: float = float("nan")
    low_confidence: bool = False


def _time_calls(fn, arg, n_repeats: int) -> list[float]:
    for _ in range(WARMUP_CALLS):
        fn(arg)
    out = []
    # as in timeit, keep collector pauses out of the measurements
    enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(n_repeats):
            t0 = time.perf_counter()
            fn(arg)
            out.append(time.perf_counter() - t0)
    finally:
        if enabled:
            gc.enable()
    return out


def run_bench(
    dx_list: Sequence[float],
    n_repeats: int,
    model: DeepOnetModel,
    beta_hat_family: Callable[[np.ndarray], np.ndarray],
    gate_tol: float = 2e-2,
) -> list[BenchResult]:
    """Time ``K(beta_hat)`` against the neural operator on each grid.

    ``beta_hat_family`` maps node coordinates to the estimate being solved
    for. The neural path evaluates its trunk on each grid's own nodes (once,
    at operator construction); the timed call is branch inference plus the
    basis expansion. Before timing, both kernels must agree to ``gate_tol``
    in relative L2.
    """
    if n_repeats < 2:
        raise ValueError("n_repeats must be >= 2")
    resolution = time.get_clock_info("perf_counter").resolution
    results = []
    for dx in dx_list:
        grid = Grid1D.from_dx(dx)
        beta_hat = GridFunction(grid, beta_hat_family(grid.x))
        neural = NeuralKernel(model, grid)

        exact = exact_kernel(beta_hat).values
        approx = neural(beta_hat).values
        gate = float(np.linalg.norm(approx - exact) / max(np.linalg.norm(exact), 1e-300))
        if not gate <= gate_tol:
            raise BenchGateError(f"dx={dx}: neural kernel relative L2 error {gate:.3e} > {gate_tol}")

        ta = _time_calls(exact_kernel, beta_hat, n_repeats)
        tn = _time_calls(neural, beta_hat, n_repeats)
        am, nm = statistics.fmean(ta), statistics.fmean(tn)
        results.append(BenchResult(
            dx=dx,
            analytic_mean_s=am,
            analytic_stddev_s=statistics.stdev(ta),
            no_mean_s=nm,
            no_stddev_s=statistics.stdev(tn),
            speedup=am / nm,
            n_repeats=n_repeats,
            gate_rel_l2=gate,
            low_confidence=resolution > 0.01 * min(am, nm),
        ))
    return results


def write_csv(results: Sequence[BenchResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dx", "analytic_mean_s", "no_mean_s", "speedup"])
        for r in results:
            writer.writerow([repr(r.dx), repr(r.analytic_mean_s), repr(r.no_mean_s), repr(r.speedup)])


def format_table(results: Sequence[BenchResult]) -> str:
    lines = [
        f"{'dx':>8}  {'analytic (s)':>20}  {'neural op (s)':>20}  {'speedup':>9}",
        "-" * 64,
    ]
    for r in results:
        flag = " *" if r.low_confidence else ""
        lines.append(
            f"{r.dx:>8g}  {r.analytic_mean_s:>11.3e} ±{r.analytic_stddev_s:>7.1e}  "
            f"{r.no_mean_s:>11.3e} ±{r.no_stddev_s:>7.1e}  {r.speedup:>8.1f}x{flag}"
        )
    if any(r.low_confidence for r in results):
        lines.append("* timer resolution above 1% of the measured mean")
    return "\n".join(lines)

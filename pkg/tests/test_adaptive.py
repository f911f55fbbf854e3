import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from backstep.adaptive import (
    AdaptiveLoopState,
    LyapunovConfig,
    PassiveConfig,
    ProjectionContractError,
    control_U,
    diagnostics,
    proj,
    proj_arrays,
    projected_euler,
    tail_correlation,
    tau_lyapunov,
    tau_passive,
    transform_w,
    update_beta_lyapunov,
    update_beta_passive,
)
from backstep.numerics import Grid1D, GridFunction, convolve, l2_norm, sup_norm
from backstep.plant import chebyshev_beta
from backstep.volterra import exact_kernel

B = 5.0
vals = st.floats(-50, 50, allow_nan=False)


def trapz(f, dx):
    return dx * (sum(f) - 0.5 * (f[0] + f[-1]))


def tail_oracle(k, g, dx):
    n = len(k)
    out = np.zeros(n)
    for i in range(n):
        f = [k[j - i] * g[j] for j in range(i, n)]
        out[i] = trapz(f, dx) if len(f) > 1 else 0.0
    return out


@settings(max_examples=200)
@given(vals, st.floats(-B, B), st.floats(0.1, 10))
def test_projection_never_amplifies(a, b, bound):
    b = float(np.clip(b, -bound, bound))
    assert proj(a, b, bound) ** 2 <= a**2


@settings(max_examples=100)
@given(vals)
def test_projection_blocks_outward_motion_at_bound(a):
    assert proj(abs(a), B, B) == 0.0
    assert proj(-abs(a), -B, B) == 0.0
    assert proj(-abs(a), B, B) == -abs(a)
    assert proj(a, 0.3, B) == a


def test_projection_contract():
    with pytest.raises(ProjectionContractError):
        proj(1.0, 5.5, B)
    with pytest.raises(ProjectionContractError):
        proj_arrays(np.ones(3), np.array([0.0, 6.0, 0.0]), B)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, 21, elements=st.floats(-B, B)),
    arrays(np.float64, 21, elements=st.floats(-1e4, 1e4)),
    st.floats(1e-4, 1.0),
)
def test_projected_euler_stays_in_bound(bh, tau, dt):
    out = projected_euler(bh, tau, B, dt)
    assert np.all(np.abs(out) <= B)
    np.testing.assert_array_equal(proj_arrays(tau, bh, B) ** 2 <= tau**2, True)


def test_control_U(grid):
    one = GridFunction.constant(grid, 1.0)
    assert control_U(one, one) == pytest.approx(1.0, abs=1e-14)
    k = GridFunction.from_callable(grid, lambda x: x)
    # int_0^1 (1 - y) * 1 dy
    assert control_U(k, one) == pytest.approx(0.5, abs=1e-12)


def test_tail_correlation_matches_loop(rng):
    dx = 1 / 30
    k, g = rng.normal(size=31), rng.normal(size=31)
    np.testing.assert_allclose(tail_correlation(k, g, dx), tail_oracle(k, g, dx), atol=1e-13)


def test_tau_lyapunov_matches_direct_formula(grid, cheb29, rng):
    cfg = LyapunovConfig(gamma=0.3, c=1.0, B=B)
    k = exact_kernel(GridFunction.from_callable(grid, lambda x: 1 + 0.5 * x))
    w = GridFunction(grid, rng.normal(size=grid.n_points))
    x, dx = grid.x, grid.dx
    ecx = np.exp(x)
    norm = trapz(ecx * w.values**2, dx)
    direct = cfg.gamma / (1 + norm) * (
        ecx * w.values - tail_oracle(k.values, ecx * w.values, dx)
    ) * w.values[0]
    np.testing.assert_allclose(tau_lyapunov(w, k, cfg).values, direct, rtol=1e-10, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 41, elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, 41, elements=st.floats(-B, B)),
    st.floats(1e-3, 10.0),
)
def test_normalised_update_rate_bound(w_vals, bh_vals, gamma):
    g = Grid1D(41)
    cfg = LyapunovConfig(gamma=gamma, c=1.0, B=B)
    k = exact_kernel(GridFunction(g, bh_vals))
    w = GridFunction(g, w_vals)
    tau = tau_lyapunov(w, k, cfg)
    norm_sq = trapz(np.exp(g.x) * w_vals**2, g.dx)
    nc = math.sqrt(norm_sq)
    bound = gamma * math.e * (1 + sup_norm(k)) * abs(w_vals[0]) * (1 + nc) / (1 + norm_sq)
    # an L2 statement: a spike in w can exceed it pointwise
    assert l2_norm(tau) <= bound * (1 + 1e-9) + 1e-300


def test_transform_round_trip(grid, cheb29):
    """w = u - k*u is inverted by u = w - beta_hat*w up to quadrature."""
    u = GridFunction.from_callable(grid, lambda x: np.cos(5 * x) + x)
    k = exact_kernel(cheb29)
    w = transform_w(u, k)
    back = w - convolve(cheb29, w)
    assert sup_norm(back - u) <= 10 * grid.dx * (1 + B * math.exp(B)) * sup_norm(u)
    fine = Grid1D.from_dx(2.5e-3)
    b_f = chebyshev_beta(fine, 2.9)
    u_f = GridFunction.from_callable(fine, lambda x: np.cos(5 * x) + x)
    w_f = transform_w(u_f, exact_kernel(b_f))
    err_f = sup_norm(w_f - convolve(b_f, w_f) - u_f)
    assert err_f < 0.5 * sup_norm(back - u)


def test_update_beta_lyapunov_zero_state_is_still(grid, cheb29):
    state = AdaptiveLoopState(0.0, GridFunction.zeros(grid), GridFunction.constant(grid, 1.0))
    out = update_beta_lyapunov(state, exact_kernel(state.beta_hat), LyapunovConfig(), 5e-3)
    np.testing.assert_array_equal(out.values, 1.0)


def test_passive_update(grid):
    cfg = PassiveConfig(gamma=2.0, gamma0=1.0, B=B)
    u = GridFunction.constant(grid, 3.0)
    uh = GridFunction.constant(grid, 1.0)
    tau = tau_passive(u, uh, cfg)
    np.testing.assert_allclose(tau.values, 2.0 * 2.0 * 3.0)
    bh = GridFunction(grid, np.where(grid.x < 0.5, B, 0.0))
    out = update_beta_passive(bh, tau, B, 0.01)
    np.testing.assert_allclose(out.values, np.where(grid.x < 0.5, B, 0.12))


@pytest.mark.parametrize("cls,kw", [(LyapunovConfig, {"gamma": 0}), (LyapunovConfig, {"c": -1}),
                                    (PassiveConfig, {"gamma0": 0}), (PassiveConfig, {"B": 0})])
def test_configs_validate(cls, kw):
    with pytest.raises(ValueError):
        cls(**kw)


def test_diagnostics_values(grid, cheb29):
    u = GridFunction.constant(grid, 2.0)
    bh = GridFunction.zeros(grid)
    state = AdaptiveLoopState(0.0, u, bh, u_hat=GridFunction.constant(grid, 1.0))
    d = diagnostics(state, cheb29, exact_kernel(bh), LyapunovConfig(gamma=0.5, c=1.0))
    # k = 0 so w = u; |w|_c^2 = 4 (e - 1)
    assert d.w_norm_c_sq == pytest.approx(4 * (np.e - 1), rel=1e-4)
    bt_sq = trapz(cheb29.values**2, grid.dx)
    assert d.V == pytest.approx(0.5 * math.log1p(4 * (np.e - 1)) + bt_sq, rel=1e-4)
    assert d.Gamma_state == pytest.approx(4 + bt_sq)
    assert d.S == pytest.approx(4 + 1 + bt_sq)

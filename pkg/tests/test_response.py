import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastsls.errors import NegativeDual
from fastsls.model import LtvSystem
from fastsls.response import (
    DualField,
    StageTightening,
    SystemResponse,
    Tightening,
    all_cost_blocks,
    backward_riccati,
    compute_beta,
    compute_hct,
    disturbance_projector,
    forward_propagate,
    solve_controller,
    stage_cost_blocks,
)
from fastsls.verify import dense_controller_oracle, response_cost, response_residual

from conftest import random_duals, random_ocp, scalar_ocp


# --- cost blocks -----------------------------------------------------------


def test_blocks_zero_dual_are_regularizer(msd1):
    w = msd1.weights
    Cx, Cu, Cux = stage_cost_blocks(np.zeros(msd1.nc), msd1.constraints.G[1], w)
    np.testing.assert_array_equal(Cx, w.Q_reg)
    np.testing.assert_array_equal(Cu, w.R_reg)
    np.testing.assert_array_equal(Cux, 0.0)
    Cf = stage_cost_blocks(np.zeros(msd1.nf), msd1.constraints.Gf, w, terminal=True)
    np.testing.assert_array_equal(Cf, w.P_reg)


def test_blocks_scalar_by_hand():
    w = scalar_ocp().weights
    Cx, Cu, Cux = stage_cost_blocks(np.array([1.0]), np.array([[1.0, 0.0]]), w)
    assert (Cx[0, 0], Cu[0, 0], Cux[0, 0]) == (2.0, 1.0, 0.0)


def test_blocks_reject_negative_dual(msd1):
    with pytest.raises(NegativeDual):
        stage_cost_blocks(-np.ones(msd1.nc), msd1.constraints.G[1], msd1.weights)
    duals = DualField.zeros(5, msd1.nc, msd1.nf)
    duals.eta[0, 2, 1] = -1e-3
    with pytest.raises(NegativeDual):
        all_cost_blocks(msd1.system, msd1.constraints, msd1.weights, duals)


# --- Riccati and propagation ------------------------------------------------


def test_riccati_scalar_one_step():
    ocp = scalar_ocp(N=2)
    one = np.ones((3, 1, 1))
    K, S, steps = backward_riccati(ocp.system, (one, np.ones((2, 1, 1)), np.zeros((2, 1, 1))), 0)
    assert steps == 1
    assert K[1, 0, 0] == pytest.approx(-0.5, abs=1e-15)
    assert S[1, 0, 0] == pytest.approx(1.5, abs=1e-15)


def test_riccati_without_actuation():
    rng = np.random.default_rng(0)
    N, nx = 4, 2
    sysm = LtvSystem(rng.standard_normal((N, nx, nx)), np.zeros((N, nx, 1)), np.repeat(np.eye(nx)[None], N, 0))
    Cx = np.repeat(np.eye(nx)[None], N + 1, 0)
    Cu = np.repeat(2 * np.eye(1)[None], N, 0)
    Cux = rng.standard_normal((N, 1, nx))
    K, _, _ = backward_riccati(sysm, (Cx, Cu, Cux), 0)
    for k in range(1, N):
        np.testing.assert_allclose(K[k], -np.linalg.solve(Cu[k], Cux[k]), atol=1e-14)


def test_riccati_long_horizon_reaches_dare(msd1):
    from fastsls.model import mass_spring_damper_chain
    ocp = mass_spring_damper_chain(1, N=400)
    A, B, w = ocp.system.A[0], ocp.system.B[0], ocp.weights
    blocks = all_cost_blocks(ocp.system, ocp.constraints, w, DualField.zeros(400, ocp.nc, ocp.nf))
    _, S, _ = backward_riccati(ocp.system, blocks, 0)
    # fixed-point iteration of the algebraic Riccati equation
    P = w.Q_reg.copy()
    for _ in range(100000):
        Pn = w.Q_reg + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(w.R_reg + B.T @ P @ B, B.T @ P @ A)
        if np.abs(Pn - P).max() < 1e-12:
            break
        P = Pn
    np.testing.assert_allclose(S[1], Pn, rtol=1e-9)


def test_forward_zero_gain_is_open_loop(msd1):
    N = 5
    phi_x, phi_u = forward_propagate(msd1.system, np.zeros((N, 1, 2)), 1)
    A, E = msd1.system.A[0], msd1.system.E[1]
    np.testing.assert_array_equal(phi_x[2], E)
    np.testing.assert_allclose(phi_x[4], A @ A @ E, atol=1e-15)
    assert not phi_u.any()


def test_forward_scalar_by_hand():
    ocp = scalar_ocp(N=3)
    K = np.zeros((3, 1, 1))
    K[1] = -0.5
    phi_x, phi_u = forward_propagate(ocp.system, K, 0)
    assert (phi_x[1, 0, 0], phi_u[1, 0, 0], phi_x[2, 0, 0]) == (1.0, -0.5, 0.5)


def test_projector_is_identity_for_square_E(msd1):
    np.testing.assert_allclose(disturbance_projector(msd1.system.E[0]), np.eye(2), atol=1e-15)
    tall = np.array([[1.0], [1.0], [0.0]])
    Om = disturbance_projector(tall)
    np.testing.assert_allclose(Om @ tall, tall, atol=1e-15)
    np.testing.assert_allclose(Om @ Om, Om, atol=1e-15)


def test_horizon_one_has_only_entry_block():
    ocp = scalar_ocp(N=1)
    res = solve_controller(ocp.system, ocp.constraints, ocp.weights, DualField.zeros(1, 4, 2))
    assert res.riccati_steps == 0
    assert res.response.phi_x[0, 1, 0, 0] == 1.0
    assert res.response.phi_u.shape == (1, 1, 1, 1) and not res.response.phi_u.any()


# --- full controller --------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), N=st.integers(1, 8), nx=st.integers(1, 4), nu=st.integers(1, 3),
       tall=st.booleans())
def test_controller_matches_dense_oracle(seed, N, nx, nu, tall):
    rng = np.random.default_rng(seed)
    nw = max(1, nx - 1) if tall else nx
    ocp = random_ocp(rng, nx=nx, nu=nu, nw=nw, N=N)
    duals = random_duals(rng, ocp)
    res = solve_controller(ocp.system, ocp.constraints, ocp.weights, duals)
    for j in range(N):
        px, pu = dense_controller_oracle(ocp.system, ocp.constraints, ocp.weights, duals, j)
        scale = 1.0 + np.linalg.norm(px)
        assert np.linalg.norm(res.response.phi_x[j] - px) <= 1e-8 * scale
        assert np.linalg.norm(res.response.phi_u[j] - pu) <= 1e-8 * scale


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_parallel_map_is_bitwise_identical(seed):
    rng = np.random.default_rng(seed)
    ocp = random_ocp(rng, nx=3, nu=2, N=7)
    duals = random_duals(rng, ocp)
    a = solve_controller(ocp.system, ocp.constraints, ocp.weights, duals)
    b = solve_controller(ocp.system, ocp.constraints, ocp.weights, duals, parallel=True, workers=3)
    np.testing.assert_array_equal(a.response.phi_x, b.response.phi_x)
    np.testing.assert_array_equal(a.gains.K, b.gains.K)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gain_perturbation_never_improves_cost(seed):
    rng = np.random.default_rng(seed)
    ocp = random_ocp(rng, nx=3, nu=2, N=5)
    duals = random_duals(rng, ocp)
    res = solve_controller(ocp.system, ocp.constraints, ocp.weights, duals)
    base = response_cost(ocp.system, ocp.constraints, ocp.weights, duals, res.response)
    j = int(rng.integers(0, 4))
    k = int(rng.integers(j + 1, 5))
    K = res.gains.K[j].copy()
    d = rng.standard_normal(K[k].shape)
    K[k] += 1e-3 * d / np.linalg.norm(d)
    phi_x, phi_u = res.response.phi_x.copy(), res.response.phi_u.copy()
    phi_x[j], phi_u[j] = forward_propagate(ocp.system, K, j)
    pert = response_cost(ocp.system, ocp.constraints, ocp.weights, duals, SystemResponse(phi_x, phi_u))
    assert pert >= base - 1e-12 * (1 + base)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), N=st.integers(1, 8))
def test_response_satisfies_propagation(seed, N):
    rng = np.random.default_rng(seed)
    ocp = random_ocp(rng, nx=3, nu=2, N=N)
    res = solve_controller(ocp.system, ocp.constraints, ocp.weights, random_duals(rng, ocp))
    assert response_residual(ocp.system, res.response) <= 1e-10
    for j in range(N):
        np.testing.assert_array_equal(res.response.phi_x[j, j + 1], ocp.system.E[j])
    S = res.gains.S
    for j in range(N):
        for k in range(j + 1, N + 1):
            assert np.linalg.eigvalsh(S[j, k]).min() >= -1e-9


@pytest.mark.parametrize("N", [1, 2, 5, 10])
def test_riccati_step_count(N):
    ocp = scalar_ocp(N=N)
    res = solve_controller(ocp.system, ocp.constraints, ocp.weights, DualField.zeros(N, 4, 2))
    assert res.riccati_steps == N * (N - 1) // 2


# --- tightening -------------------------------------------------------------


def test_beta_unit_row():
    N = 2
    phi_x = np.zeros((N, N + 1, 2, 2))
    phi_u = np.zeros((N, N, 1, 2))
    phi_x[0, 1] = [[1.0, 0.0], [0.0, 0.0]]
    G = np.zeros((N, 1, 3))
    G[:, 0, 0] = 1.0
    from fastsls.model import ConstraintSet
    cons = ConstraintSet(G, -np.ones((N, 1)), np.array([[1.0, 0.0]]), -np.ones(1))
    beta = compute_beta(SystemResponse(phi_x, phi_u), cons)
    assert beta.beta[0, 1, 0] == 1.0
    assert beta.beta_f[1, 0] == 0.0


def test_beta_scalar_chain():
    ocp = scalar_ocp(N=3)
    K = np.zeros((3, 1, 1))
    K[1] = -0.5
    phi_x, phi_u = np.zeros((3, 4, 1, 1)), np.zeros((3, 3, 1, 1))
    phi_x[0], phi_u[0] = forward_propagate(ocp.system, K, 0)
    beta = compute_beta(SystemResponse(phi_x, phi_u), ocp.constraints)
    # row 0 is (1, 0) on (x, u)
    assert beta.beta[0, 1, 0] == 1.0
    assert beta.beta[0, 2, 0] == 0.25


def test_hct_by_hand():
    N, nc, nf = 4, 3, 2
    assert not compute_hct(Tightening.zeros(N, nc, nf), 0.0).stage.any()
    ones = Tightening(np.ones((N, N, nc)), np.ones((N, nf)), 0.0)
    h = compute_hct(ones)
    np.testing.assert_array_equal(h.stage, np.arange(N)[:, None] * np.ones(nc))
    np.testing.assert_array_equal(h.terminal, N * np.ones(nf))
    h = compute_hct(Tightening.zeros(N, nc, nf), 1e-10)
    np.testing.assert_allclose(h.stage, np.arange(N)[:, None] * 1e-5 * np.ones(nc), rtol=1e-12)
    assert isinstance(h, StageTightening)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.floats(0, 1e-3), d_eps=st.floats(0, 1e-3))
def test_hct_monotone(seed, eps, d_eps):
    rng = np.random.default_rng(seed)
    b = rng.random((5, 5, 3))
    bf = rng.random((5, 2))
    lo = compute_hct(Tightening(b, bf, eps))
    bump = rng.random(b.shape) * (rng.random(b.shape) < 0.3)
    hi = compute_hct(Tightening(b + bump, bf + rng.random(bf.shape), eps + d_eps))
    assert np.all(hi.stage >= lo.stage) and np.all(hi.terminal >= lo.terminal)
    assert not lo.stage[0].any()

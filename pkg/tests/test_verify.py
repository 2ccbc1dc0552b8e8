import numpy as np
import pytest
from dataclasses import replace

from fastsls.errors import InsufficientHistory
from fastsls.fast_sls import solve
from fastsls.model import LtvSystem, RobustOcp
from fastsls.response import DualField, SystemResponse, solve_controller
from fastsls.verify import (
    check_complementarity,
    check_socp_feasibility,
    controller_stationarity,
    dense_controller_oracle,
    estimate_convergence_rate,
    kkt_bundle,
    monte_carlo_robustness,
    verify_solution,
)

from conftest import L1_ACTIVE_X0, random_duals, random_ocp, scalar_ocp


@pytest.fixture(scope="module")
def l1_sol(msd1):
    return solve(msd1, L1_ACTIVE_X0)


def test_oracle_scalar_one_step():
    # column 0 of N=2: one decision Phi_u[1] with Phi_x[1] = 1, Phi_x[2] = 1 + Phi_u[1]
    ocp = scalar_ocp(N=2)
    px, pu = dense_controller_oracle(ocp.system, ocp.constraints, ocp.weights, DualField.zeros(2, 4, 2), 0)
    assert pu[1, 0, 0] == pytest.approx(-0.5, abs=1e-14)
    assert px[2, 0, 0] == pytest.approx(0.5, abs=1e-14)


def test_oracle_zero_duals_equals_lqr(msd1):
    d = DualField.zeros(5, msd1.nc, msd1.nf)
    res = solve_controller(msd1.system, msd1.constraints, msd1.weights, d)
    for j in range(5):
        px, pu = dense_controller_oracle(msd1.system, msd1.constraints, msd1.weights, d, j)
        np.testing.assert_allclose(px, res.response.phi_x[j], atol=1e-10)
        np.testing.assert_allclose(pu, res.response.phi_u[j], atol=1e-10)


def test_oracle_random_frozen_instance():
    rng = np.random.default_rng(11)
    ocp = random_ocp(rng, nx=3, nu=2, N=5)
    duals = random_duals(rng, ocp)
    res = solve_controller(ocp.system, ocp.constraints, ocp.weights, duals)
    for j in range(5):
        px, pu = dense_controller_oracle(ocp.system, ocp.constraints, ocp.weights, duals, j)
        assert np.linalg.norm(px - res.response.phi_x[j]) <= 1e-8
        assert np.linalg.norm(pu - res.response.phi_u[j]) <= 1e-8
    assert controller_stationarity(ocp.system, ocp.constraints, ocp.weights, duals, res.response) <= 1e-10


def test_converged_solution_is_feasible(msd1, l1_sol):
    rep = check_socp_feasibility(msd1, L1_ACTIVE_X0, l1_sol.nominal, l1_sol.certified_response, 1e-6)
    assert rep.passed
    assert rep.socp_residual >= 0 and rep.dynamics_residual >= 0 and rep.response_residual >= 0


def test_perturbed_state_fails_dynamics(msd1, l1_sol):
    z = l1_sol.nominal.z.copy()
    z[2, 0] += 1.0
    rep = check_socp_feasibility(msd1, L1_ACTIVE_X0, replace(l1_sol.nominal, z=z), l1_sol.certified_response)
    assert rep.dynamics_residual >= 0.9
    assert not rep.checks["dynamics"] and not rep.passed


def test_zeroed_block_fails_propagation(msd1, l1_sol):
    r = l1_sol.certified_response
    phi_x = r.phi_x.copy()
    phi_x[0, 2] = 0.0
    rep = check_socp_feasibility(msd1, L1_ACTIVE_X0, l1_sol.nominal, SystemResponse(phi_x, r.phi_u))
    assert not rep.checks["response"]


def test_vanishing_disturbance_reduces_to_nominal(msd1):
    sysm = LtvSystem(msd1.system.A, msd1.system.B, 1e-9 * np.asarray(msd1.system.E))
    ocp = RobustOcp(sysm, msd1.constraints, msd1.weights)
    sol = solve(ocp, np.array([1.0, 0.0]))
    assert sol.tightening.beta.max() < 1e-15
    assert check_socp_feasibility(ocp, np.array([1.0, 0.0]), sol.nominal, sol.response).passed


def test_monte_carlo_converged_no_violations(msd1, l1_sol):
    rep = monte_carlo_robustness(msd1, L1_ACTIVE_X0, l1_sol, n_samples=10_000, seed=0)
    assert rep.samples == 10_000 and rep.violations == 0
    assert rep.passed


def test_monte_carlo_zero_sample_never_violates(msd1, l1_sol):
    rep = monte_carlo_robustness(msd1, L1_ACTIVE_X0, l1_sol, n_samples=1)
    assert rep.violations == 0 and rep.max_sample_violation < 0


def test_monte_carlo_detects_open_loop(msd1, l1_sol):
    # without feedback the tube overshoots the bounds this solution rides
    r = l1_sol.certified_response
    open_loop = (l1_sol.nominal, SystemResponse(r.phi_x, np.zeros_like(r.phi_u)))
    rep = monte_carlo_robustness(msd1, L1_ACTIVE_X0, open_loop, n_samples=2000, seed=1)
    assert 0 < rep.violations <= rep.samples


def test_monte_carlo_deterministic_and_worker_independent(msd1, l1_sol):
    a = monte_carlo_robustness(msd1, L1_ACTIVE_X0, l1_sol, n_samples=5000, seed=3, shard_size=1000)
    b = monte_carlo_robustness(msd1, L1_ACTIVE_X0, l1_sol, n_samples=5000, seed=3, shard_size=1000, workers=4)
    assert a.to_dict() == b.to_dict()


def test_monte_carlo_rejects_zero_samples(msd1, l1_sol):
    with pytest.raises(ValueError):
        monte_carlo_robustness(msd1, L1_ACTIVE_X0, l1_sol, n_samples=0)


def test_complementarity_by_hand(msd1, l1_sol):
    nom = l1_sol.nominal
    zero = replace(nom, mu=np.zeros_like(nom.mu), mu_f=np.zeros_like(nom.mu_f))
    assert check_complementarity(msd1, zero, l1_sol.enforced, 1e-10)[0] == 0.0
    # mu = 3 on a row with exactly zero slack: z_0 velocity on its bound
    ocp = msd1
    z = nom.z.copy()
    z[0] = [0.0, 4.0]
    mu = np.zeros_like(nom.mu)
    mu[0, 1] = 3.0
    active = replace(nom, z=z, mu=mu, mu_f=np.zeros_like(nom.mu_f))
    val, ok = check_complementarity(ocp, active, l1_sol.enforced, 1e-10)
    assert val == 0.0 and ok


def test_converged_complementarity(msd1, l1_sol):
    val, ok = check_complementarity(msd1, l1_sol.nominal, l1_sol.enforced, l1_sol.tightening.eps_beta)
    assert ok and val <= 1e-6


def test_rate_needs_three_iterates(msd1):
    with pytest.raises(InsufficientHistory):
        estimate_convergence_rate(solve(msd1, np.zeros(2)))


def test_rate_geometric():
    rho = 0.3
    ys = [np.full(4, rho ** i) for i in range(30)] + [np.zeros(4)]
    r = estimate_convergence_rate(ys)
    np.testing.assert_allclose(r[:-1], rho, rtol=1e-9)


def test_constrained_rates_below_one(msd1, l1_sol):
    assert np.all(estimate_convergence_rate(l1_sol)[1:] < 1)


def test_verify_solution_skips_robustness(msd1, l1_sol):
    rep = verify_solution(msd1, L1_ACTIVE_X0, l1_sol, n_samples=0)
    assert rep.checks["robustness"] == "skipped"
    assert rep.samples is None and rep.passed


def test_kkt_bundle_at_convergence(msd1, l1_sol):
    b = kkt_bundle(msd1, L1_ACTIVE_X0, l1_sol)
    assert max(b.values()) <= 1e-6

import numpy as np
import pytest

from fastsls.model import ConstraintSet, CostWeights, LtvSystem, RobustOcp, mass_spring_damper_chain
from fastsls.response import DualField

# constrained benchmark states whose solves converge (frozen from the solver)
L1_ACTIVE_X0 = np.array([-1.4, 3.6])
L2_ACTIVE_X0 = np.array([0.53, -0.66, -1.77, 0.15])


def spd(rng, n, floor=0.5):
    M = rng.standard_normal((n, n))
    return M @ M.T + floor * np.eye(n)


def random_ocp(rng, nx=3, nu=2, nw=None, N=5, nc=4, nf=3) -> RobustOcp:
    """Random instance with SPD weights, full-rank E and rows ``G x <= 1``."""
    nw = nx if nw is None else nw
    A = rng.standard_normal((N, nx, nx)) / np.sqrt(nx)
    B = rng.standard_normal((N, nx, nu))
    E = rng.standard_normal((N, nx, nw))
    sysm = LtvSystem(A, B, E)
    cons = ConstraintSet(rng.standard_normal((N, nc, nx + nu)), -np.ones((N, nc)),
                         rng.standard_normal((nf, nx)), -np.ones(nf))
    w = CostWeights(Q=spd(rng, nx), R=spd(rng, nu), P=spd(rng, nx),
                    Q_reg=spd(rng, nx), R_reg=spd(rng, nu), P_reg=spd(rng, nx))
    return RobustOcp(sysm, cons, w)


def random_duals(rng, ocp: RobustOcp, density=0.5) -> DualField:
    N = ocp.N
    eta = rng.exponential(1.0, (N, N, ocp.nc)) * (rng.random((N, N, ocp.nc)) < density)
    eta *= np.triu(np.ones((N, N)), 1)[:, :, None]
    eta_f = rng.exponential(1.0, (N, ocp.nf)) * (rng.random((N, ocp.nf)) < density)
    return DualField(eta, eta_f)


def scalar_ocp(N=1, bound=10.0) -> RobustOcp:
    """``x+ = x + u + w`` with unit weights and loose box constraints."""
    one = np.ones((N, 1, 1))
    sysm = LtvSystem(one, one, one)
    G = np.repeat(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])[None], N, 0)
    cons = ConstraintSet(G, -bound * np.ones((N, 4)), np.array([[1.0], [-1.0]]), -bound * np.ones(2))
    I = np.eye(1)
    return RobustOcp(sysm, cons, CostWeights(I, I, I, I, I, I))


@pytest.fixture(scope="session")
def msd1():
    return mass_spring_damper_chain(1, N=5)


@pytest.fixture(scope="session")
def msd2():
    return mass_spring_damper_chain(2, N=10)


# (name, passed, detail) lines filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")

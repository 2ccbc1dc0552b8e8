"""Sequential convex programming for nonlinear dynamics.

Each outer iteration linearises ``z+ = phi(z, v)`` along the current nominal
``y_bar = (z, v, tau)``, freezes ``tau`` inside the disturbance entry block,
adds the linear cost correction ``Gamma' eta_bar Delta y`` and solves the
resulting linear robust problem with the fast-SLS solver.  The nominal
update is a full step; there is no globalisation.

``tau[k]`` bounds the deviation of ``(x_k, u_k)`` from the nominal and enters
the inner problem as an extra input column with no effect on the dynamics.
It is only present when the curvature bound is nonzero; with a zero bound
the inner problem is exactly the linear one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    DegenerateAlpha,
    DimensionMismatch,
    Infeasible,
    InnerInfeasible,
    InvalidParameter,
    MaxOuterIterations,
)
from .fast_sls import SlsSolution, SolverConfig, solve
from .model import ConstraintSet, CostWeights, LtvSystem, RobustOcp
from .nominal_qp import AffineTerms
from .response import DualField, SystemResponse

TAU_WEIGHT = 1e-4


def _fd_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        step = h * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        cols.append((f(xp) - f(xm)) / (2 * step))
    return np.stack(cols, axis=-1)


@dataclass
class NonlinearModel:
    """Nonlinear plant ``z+ = phi(z, v)`` with robust constraints.

    ``jac_z`` and ``jac_v`` return ``d phi / dz`` (nx, nx) and ``d phi / dv``
    (nx, nu), i.e. the matrices that play the role of ``A`` and ``B``.
    ``mu_curv`` (nx, nx) bounds the curvature of ``phi``; ``alpha1`` and
    ``alpha2`` split the lumped disturbance and linearisation error.
    """

    phi: Callable
    jac_z: Callable
    jac_v: Callable
    E: np.ndarray
    constraints: ConstraintSet
    weights: CostWeights
    mu_curv: np.ndarray
    alpha1: float = 0.5
    alpha2: float = 0.5
    probe_tol: float = 1e-5

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=float)
        if self.E.ndim != 3:
            raise DimensionMismatch("E", f"expected (N, nx, nw), got {self.E.shape}")
        nx = self.E.shape[1]
        self.mu_curv = np.atleast_2d(np.asarray(self.mu_curv, dtype=float))
        if self.mu_curv.shape != (nx, nx):
            raise DimensionMismatch("mu_curv", f"expected ({nx}, {nx}), got {self.mu_curv.shape}")
        if min(self.alpha1, self.alpha2) < 0 or self.alpha1 + self.alpha2 > 1 + 1e-12:
            raise InvalidParameter(f"need alpha1, alpha2 >= 0 and alpha1 + alpha2 <= 1, "
                                   f"got {self.alpha1}, {self.alpha2}")
        if np.any(self.mu_curv != 0) and self.nw != nx:
            raise DimensionMismatch("E", "a curvature term needs a square disturbance matrix")
        self._probe()

    @property
    def N(self) -> int:
        return self.E.shape[0]

    @property
    def nx(self) -> int:
        return self.E.shape[1]

    @property
    def nw(self) -> int:
        return self.E.shape[2]

    @property
    def nu(self) -> int:
        return self.constraints.G.shape[2] - self.nx

    @property
    def has_tau(self) -> bool:
        return bool(np.any(self.mu_curv != 0))

    def _probe(self):
        z, v = np.zeros(self.nx), np.zeros(self.nu)
        Az, Bv = np.asarray(self.jac_z(z, v)), np.asarray(self.jac_v(z, v))
        if Az.shape != (self.nx, self.nx) or Bv.shape != (self.nx, self.nu):
            raise DimensionMismatch("jacobian", f"got {Az.shape} and {Bv.shape}")
        Az_fd = _fd_jacobian(lambda x: np.asarray(self.phi(x, v), dtype=float), z)
        Bv_fd = _fd_jacobian(lambda u: np.asarray(self.phi(z, u), dtype=float), v)
        err = max(np.abs(Az - Az_fd).max(), np.abs(Bv - Bv_fd).max())
        if not np.isfinite(err) or err > self.probe_tol:
            raise InvalidParameter(f"Jacobian callbacks disagree with finite differences ({err:.2e})")

    def rollout(self, x0, v):
        z = np.empty((self.N + 1, self.nx))
        z[0] = x0
        for k in range(self.N):
            z[k + 1] = self.phi(z[k], v[k])
        return z


@dataclass
class ScpState:
    """Current nominal ``(z, v, tau)`` with the last inner solution.

    ``iterations`` counts nominal updates; the final inner solve only
    confirms the fixed point, so ``len(steps) == iterations + 1`` on
    convergence.  ``steps`` holds ``||Delta y||_inf`` per inner solve.
    """

    z: np.ndarray
    v: np.ndarray
    tau: np.ndarray
    duals: DualField | None = None
    response: SystemResponse | None = None
    inner: SlsSolution | None = None
    inner_ocp: RobustOcp | None = None
    iterations: int = 0
    steps: list = field(default_factory=list)
    converged: bool = False

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.z.ravel(), self.v.ravel(), self.tau.ravel()])


def _entry_blocks(model: NonlinearModel, tau):
    """Disturbance entry ``E_j / alpha1 + sqrt(nx) tau_j^2 mu_curv / alpha2``."""
    if model.alpha1 == 0:
        raise DegenerateAlpha("alpha1 = 0 with a nonzero disturbance matrix")
    E = model.E / model.alpha1
    if model.has_tau and np.any(tau != 0):
        if model.alpha2 == 0:
            raise DegenerateAlpha("alpha2 = 0 with a nonzero linearisation-error term")
        E = E + (np.sqrt(model.nx) * np.asarray(tau)[:, None, None] ** 2 / model.alpha2) * model.mu_curv
    return E


def _jacobians(model: NonlinearModel, z, v):
    A = np.stack([model.jac_z(z[k], v[k]) for k in range(model.N)])
    B = np.stack([model.jac_v(z[k], v[k]) for k in range(model.N)])
    return A, B


def _augmented_constraints(model: NonlinearModel) -> ConstraintSet:
    """Append a zero ``tau`` column and the rows ``sum_j ||e_i' Phi[k, j]|| - tau_k <= 0``."""
    c = model.constraints
    N, nx, nu = model.N, model.nx, model.nu
    nz = nx + nu
    G = np.concatenate([c.G, np.zeros((N, c.nc, 1))], axis=2)
    Gc = np.concatenate([c.cone_G, np.zeros((N, c.nc, 1))], axis=2)
    rows_nom = np.zeros((nz, nz + 1))
    rows_nom[:, nz] = -1.0
    rows_cone = np.hstack([np.eye(nz), np.zeros((nz, 1))])
    G = np.concatenate([G, np.repeat(rows_nom[None], N, 0)], axis=1)
    Gc = np.concatenate([Gc, np.repeat(rows_cone[None], N, 0)], axis=1)
    b = np.concatenate([c.b, np.zeros((N, nz))], axis=1)
    return ConstraintSet(G, b, c.Gf, c.bf, G_cone=Gc, Gf_cone=c.cone_Gf)


def _augmented_weights(w: CostWeights) -> CostWeights:
    def pad(R):
        n = R.shape[0]
        out = np.zeros((n + 1, n + 1))
        out[:n, :n] = R
        out[n, n] = TAU_WEIGHT
        return out
    return CostWeights(Q=w.Q, R=pad(w.R), P=w.P, Q_reg=w.Q_reg, R_reg=pad(w.R_reg), P_reg=w.P_reg)


def linearize_along(model: NonlinearModel, state: ScpState):
    """Inner linear problem at ``state``: returns ``(ocp, drift)``.

    ``A_k, B_k`` are the Jacobians at ``(z_k, v_k)`` and ``drift[k]`` the
    constant ``phi(z_k, v_k) - A_k z_k - B_k v_k`` so that the inner dynamics
    ``z+ = A z + B v + drift`` read in absolute coordinates.
    """
    N = model.N
    if state.z.shape != (N + 1, model.nx) or state.v.shape != (N, model.nu) or state.tau.shape != (N,):
        raise DimensionMismatch("state", "nominal trajectory does not match the model horizon")
    A, B = _jacobians(model, state.z, state.v)
    drift = np.stack([model.phi(state.z[k], state.v[k]) - A[k] @ state.z[k] - B[k] @ state.v[k]
                      for k in range(N)])
    E = _entry_blocks(model, state.tau)
    if model.has_tau:
        B = np.concatenate([B, np.zeros((N, model.nx, 1))], axis=2)
        cons, w = _augmented_constraints(model), _augmented_weights(model.weights)
    else:
        cons, w = model.constraints, model.weights
    ocp = RobustOcp(LtvSystem(A, B, E), cons, w, {"generator": "linearize_along"})
    return ocp, drift


def _weighted_tightening(model, cons, duals, phi_u, y, N, nx, nu):
    """``sum eta * beta`` with ``Phi_u`` fixed and ``Phi_x`` re-propagated along ``y``."""
    z = y[:(N + 1) * nx].reshape(N + 1, nx)
    v = y[(N + 1) * nx:(N + 1) * nx + N * nu].reshape(N, nu)
    tau = y[(N + 1) * nx + N * nu:]
    A, B = _jacobians(model, z, v)
    E = _entry_blocks(model, tau) if model.has_tau else model.E / model.alpha1
    Gc, Gfc = cons.cone_G, cons.cone_Gf
    total = 0.0
    for j in range(N):
        px = E[j]
        for k in range(j + 1, N):
            pu = phi_u[j, k]
            g = Gc[k][:, :nx] @ px + Gc[k][:, nx:] @ pu
            total += duals.eta[j, k] @ np.sum(g * g, axis=1)
            px = A[k] @ px + B[k] @ pu[:nu]
        g = Gfc @ px
        total += duals.eta_f[j] @ np.sum(g * g, axis=1)
    return total


def gamma_eta_term(model: NonlinearModel, state: ScpState, response: SystemResponse | None,
                   duals: DualField | None, h: float = 1e-6) -> AffineTerms:
    """Linear cost correction ``Gamma' eta`` by central finite differences.

    Differentiates ``eta' H(M, y)`` in every coordinate of ``y = (z, v, tau)``
    with step ``h (1 + |y_i|)``, holding ``M = Phi_u`` and ``eta`` fixed.
    Returns the gradient as :class:`AffineTerms` ``q, r, p`` (``r`` includes
    the ``tau`` column when present).
    """
    N, nx, nu = model.N, model.nx, model.nu
    nr = nu + (1 if model.has_tau else 0)
    zero = AffineTerms(q=np.zeros((N, nx)), r=np.zeros((N, nr)), p=np.zeros(nx))
    if duals is None or response is None or (not np.any(duals.eta) and not np.any(duals.eta_f)):
        return zero
    cons = _augmented_constraints(model) if model.has_tau else model.constraints
    y = state.y.copy()
    grad = np.zeros_like(y)
    f = lambda yy: _weighted_tightening(model, cons, duals, response.phi_u, yy, N, nx, nu)
    # z_0 is fixed and z_N does not enter the propagation
    skip = set(range(nx)) | set(range(N * nx, (N + 1) * nx))
    for i in range(y.size):
        if i in skip:
            continue
        step = h * (1.0 + abs(y[i]))
        yp, ym = y.copy(), y.copy()
        yp[i] += step
        ym[i] -= step
        grad[i] = (f(yp) - f(ym)) / (2 * step)
    gz = grad[:(N + 1) * nx].reshape(N + 1, nx)
    gv = grad[(N + 1) * nx:(N + 1) * nx + N * nu].reshape(N, nu)
    r = gv if not model.has_tau else np.hstack([gv, grad[(N + 1) * nx + N * nu:][:, None]])
    return AffineTerms(q=gz[:N].copy(), r=r, p=gz[N].copy())


def scp_solve(model: NonlinearModel, x0, config: SolverConfig | None = None, tol: float = 1e-6,
              max_outer: int = 20, v_init=None, fd_step: float = 1e-6) -> ScpState:
    """Outer SCP loop; each inner problem is solved by the fast-SLS solver.

    Raises :class:`InnerInfeasible` when an inner problem has no feasible
    first iterate and :class:`MaxOuterIterations` (with the last state in
    ``exc.state``) when ``||Delta y||_inf`` stays above ``tol``.
    """
    config = config or SolverConfig()
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.nx,):
        raise DimensionMismatch("x0", f"expected ({model.nx},), got {x0.shape}")
    N = model.N
    v = np.zeros((N, model.nu)) if v_init is None else np.asarray(v_init, dtype=float)
    state = ScpState(z=model.rollout(x0, v), v=v, tau=np.zeros(N))
    for it in range(1, max_outer + 2):
        ocp, drift = linearize_along(model, state)
        corr = gamma_eta_term(model, state, state.response, state.duals, fd_step)
        affine = AffineTerms(c=drift, q=corr.q, r=corr.r, p=corr.p)
        try:
            inner = solve(ocp, x0, config, affine=affine)
        except Infeasible:
            raise InnerInfeasible(it) from None
        nom = inner.nominal
        v_new = nom.v[:, :model.nu]
        tau_new = nom.v[:, model.nu] if model.has_tau else np.zeros(N)
        step = float(max(np.abs(nom.z - state.z).max(), np.abs(v_new - state.v).max(),
                         np.abs(tau_new - state.tau).max()))
        state = ScpState(z=nom.z.copy(), v=v_new.copy(), tau=np.maximum(tau_new, 0.0),
                         duals=inner.duals, response=inner.certified_response, inner=inner,
                         inner_ocp=ocp, iterations=state.iterations, steps=state.steps + [step])
        if step <= tol:
            state.converged = True
            return state
        state.iterations += 1
        if state.iterations > max_outer:
            break
    exc = MaxOuterIterations(f"outer step {state.steps[-1]:.3e} above {tol:g} after {max_outer} iterations")
    exc.state = state
    raise exc


# ---------------------------------------------------------------------------
# demo registry
# ---------------------------------------------------------------------------


def _box(N, nx, nu, xmax, umax):
    nz = nx + nu
    G = np.vstack([np.eye(nz), -np.eye(nz)])
    b = -np.concatenate([np.full(nx, xmax), np.full(nu, umax)] * 2)
    Gf = np.vstack([np.eye(nx), -np.eye(nx)])
    bf = -np.full(2 * nx, xmax)
    return ConstraintSet(np.repeat(G[None], N, 0), np.repeat(b[None], N, 0), Gf, bf)


def linear_demo(N: int = 10):
    """Single mass-spring-damper as a nonlinear model with zero curvature."""
    from .model import mass_spring_damper_chain

    ocp = mass_spring_damper_chain(1, N=N)
    A, B = ocp.system.A[0], ocp.system.B[0]
    model = NonlinearModel(phi=lambda z, v: A @ z + B @ v, jac_z=lambda z, v: A, jac_v=lambda z, v: B,
                           E=np.asarray(ocp.system.E), constraints=ocp.constraints, weights=ocp.weights,
                           mu_curv=np.zeros((2, 2)), alpha1=1.0, alpha2=0.0)
    return model, np.array([1.1, 2.0])


def sine_demo(N: int = 10):
    """Scalar ``z+ = z + 0.1 sin(z) + v`` with loose bounds."""
    model = NonlinearModel(
        phi=lambda z, v: z + 0.1 * np.sin(z) + v,
        jac_z=lambda z, v: np.atleast_2d(1.0 + 0.1 * np.cos(z[0])),
        jac_v=lambda z, v: np.eye(1),
        E=np.full((N, 1, 1), 0.05),
        constraints=_box(N, 1, 1, 5.0, 5.0),
        weights=CostWeights(Q=np.eye(1), R=np.eye(1), P=np.eye(1), Q_reg=np.eye(1), R_reg=np.eye(1),
                            P_reg=np.eye(1)),
        mu_curv=np.full((1, 1), 0.1),
    )
    return model, np.array([2.0])


MODELS = {"linear": linear_demo, "sine": sine_demo}

"""Problem data for robust optimal control of uncertain LTV systems.

Dynamics ``x[k+1] = A[k] x[k] + B[k] u[k] + E[k] w[k]`` with ``||w[k]||_2 <= 1``,
stage constraints ``G[k] (x, u) + b[k] <= 0`` and terminal constraints
``Gf x[N] + bf <= 0``.  Matrices are stored stacked along a leading stage axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidParameter,
    NotPositiveDefinite,
    RankDeficientE,
)


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise DimensionMismatch(name, f"expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LtvSystem:
    """Stage matrices ``A`` (N, nx, nx), ``B`` (N, nx, nu), ``E`` (N, nx, nw)."""

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(self.A, 3, "A"))
        object.__setattr__(self, "B", _frozen(self.B, 3, "B"))
        object.__setattr__(self, "E", _frozen(self.E, 3, "E"))

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def nx(self) -> int:
        return self.A.shape[1]

    @property
    def nu(self) -> int:
        return self.B.shape[2]

    @property
    def nw(self) -> int:
        return self.E.shape[2]


@dataclass(frozen=True)
class ConstraintSet:
    """Polytopic stage and terminal constraints.

    ``G`` is (N, nc, nx+nu) and ``b`` is (N, nc); ``Gf`` is (nf, nx) and ``bf``
    is (nf,).  ``G_cone``/``Gf_cone`` optionally give different row vectors
    for the uncertainty (cone) part of each robust constraint, i.e. the
    robust row reads ``g_nom'(z, v) + sum_j ||g_cone' Phi_kj|| + b <= 0``.
    They default to ``G``/``Gf``; only the nonlinear extension needs them.
    """

    G: np.ndarray
    b: np.ndarray
    Gf: np.ndarray
    bf: np.ndarray
    G_cone: np.ndarray | None = None
    Gf_cone: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "G", _frozen(self.G, 3, "G"))
        object.__setattr__(self, "b", _frozen(self.b, 2, "b"))
        object.__setattr__(self, "Gf", _frozen(np.reshape(self.Gf, (-1, np.shape(self.Gf)[-1])), 2, "Gf"))
        object.__setattr__(self, "bf", _frozen(np.ravel(self.bf), 1, "bf"))
        if self.G_cone is not None:
            object.__setattr__(self, "G_cone", _frozen(self.G_cone, 3, "G_cone"))
        if self.Gf_cone is not None:
            object.__setattr__(self, "Gf_cone", _frozen(self.Gf_cone, 2, "Gf_cone"))

    @property
    def nc(self) -> int:
        return self.G.shape[1]

    @property
    def nf(self) -> int:
        return self.Gf.shape[0]

    @property
    def cone_G(self) -> np.ndarray:
        return self.G if self.G_cone is None else self.G_cone

    @property
    def cone_Gf(self) -> np.ndarray:
        return self.Gf if self.Gf_cone is None else self.Gf_cone


@dataclass(frozen=True)
class CostWeights:
    """Nominal weights ``Q, R, P`` and response regularizer ``Q_reg, R_reg, P_reg``."""

    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    Q_reg: np.ndarray
    R_reg: np.ndarray
    P_reg: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R", "P", "Q_reg", "R_reg", "P_reg"):
            object.__setattr__(self, name, _frozen(np.atleast_2d(getattr(self, name)), 2, name))


@dataclass(frozen=True)
class RobustOcp:
    system: LtvSystem
    constraints: ConstraintSet
    weights: CostWeights
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def N(self) -> int:
        return self.system.N

    @property
    def nx(self) -> int:
        return self.system.nx

    @property
    def nu(self) -> int:
        return self.system.nu

    @property
    def nw(self) -> int:
        return self.system.nw

    @property
    def nc(self) -> int:
        return self.constraints.nc

    @property
    def nf(self) -> int:
        return self.constraints.nf


def _check_shape(arr: np.ndarray, shape: tuple, location: str):
    if arr.shape != shape:
        raise DimensionMismatch(location, f"expected {shape}, got {arr.shape}")


def _check_spd(M: np.ndarray, which: str):
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, rtol=1e-10, atol=1e-12):
        raise NotPositiveDefinite(which)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(which) from None


def validate(ocp: RobustOcp) -> None:
    """Raise on the first violated invariant of ``ocp``; return None otherwise."""
    sysm, cons, w = ocp.system, ocp.constraints, ocp.weights
    N, nx, nu, nw = sysm.N, sysm.nx, sysm.nu, sysm.nw
    if N < 1:
        raise DimensionMismatch("system.N", "horizon must be at least 1")
    _check_shape(sysm.A, (N, nx, nx), "system.A")
    _check_shape(sysm.B, (N, nx, nu), "system.B")
    _check_shape(sysm.E, (N, nx, nw), "system.E")
    if nw > nx:
        raise DimensionMismatch("system.E", f"n_w={nw} exceeds n_x={nx}")
    nc, nf = cons.nc, cons.nf
    _check_shape(cons.G, (N, nc, nx + nu), "constraints.G")
    _check_shape(cons.b, (N, nc), "constraints.b")
    _check_shape(cons.Gf, (nf, nx), "constraints.Gf")
    _check_shape(cons.bf, (nf,), "constraints.bf")
    if cons.G_cone is not None:
        _check_shape(cons.G_cone, (N, nc, nx + nu), "constraints.G_cone")
    if cons.Gf_cone is not None:
        _check_shape(cons.Gf_cone, (nf, nx), "constraints.Gf_cone")
    for name, n in (("Q", nx), ("R", nu), ("P", nx), ("Q_reg", nx), ("R_reg", nu), ("P_reg", nx)):
        _check_shape(getattr(w, name), (n, n), f"weights.{name}")
    for name in ("Q", "R", "P", "Q_reg", "R_reg", "P_reg"):
        _check_spd(getattr(w, name), name)
    for k in range(N):
        if np.linalg.matrix_rank(sysm.E[k]) < nw:
            raise RankDeficientE(k)


def mass_spring_damper_chain(L: int, N: int = 10, dt: float = 0.1, m: float = 1.0,
                             k_spring: float = 10.0, d: float = 2.0,
                             bound: float = 4.0) -> RobustOcp:
    """Chain of ``L`` masses fixed to a wall at one end, one force per mass.

    State ordering is ``(p_1, v_1, ..., p_L, v_L)``.  Forward-Euler
    discretization; ``E = 0.1 I``; ``Q = P = 3 I``, ``R = I`` with the
    regularizer equal to the nominal weights; ``||x||_inf, ||u||_inf <= bound``.
    """
    if int(L) != L or L < 1:
        raise InvalidParameter(f"mass count must be a positive integer, got {L}")
    if int(N) != N or N < 1:
        raise InvalidParameter(f"horizon must be a positive integer, got {N}")
    for name, val in (("dt", dt), ("m", m)):
        if not val > 0:
            raise InvalidParameter(f"{name} must be positive, got {val}")
    for name, val in (("k_spring", k_spring), ("d", d), ("bound", bound)):
        if not val >= 0:
            raise InvalidParameter(f"{name} must be nonnegative, got {val}")
    L, N = int(L), int(N)
    nx, nu = 2 * L, L

    Ac = np.zeros((nx, nx))
    Bc = np.zeros((nx, nu))
    for i in range(L):
        p, v = 2 * i, 2 * i + 1
        Ac[p, v] = 1.0
        # link to the left neighbour (the wall for i == 0)
        Ac[v, p] -= k_spring / m
        Ac[v, v] -= d / m
        if i > 0:
            Ac[v, p - 2] += k_spring / m
            Ac[v, v - 2] += d / m
        if i < L - 1:
            Ac[v, p] -= k_spring / m
            Ac[v, v] -= d / m
            Ac[v, p + 2] += k_spring / m
            Ac[v, v + 2] += d / m
        Bc[v, i] = 1.0 / m

    A = np.eye(nx) + dt * Ac
    B = dt * Bc
    E = 0.1 * np.eye(nx)
    system = LtvSystem(np.repeat(A[None], N, 0), np.repeat(B[None], N, 0), np.repeat(E[None], N, 0))

    nz = nx + nu
    G = np.vstack([np.eye(nz), -np.eye(nz)])
    b = -bound * np.ones(2 * nz)
    Gf = np.vstack([np.eye(nx), -np.eye(nx)])
    bf = -bound * np.ones(2 * nx)
    constraints = ConstraintSet(np.repeat(G[None], N, 0), np.repeat(b[None], N, 0), Gf, bf)

    Q, R = 3.0 * np.eye(nx), np.eye(nu)
    weights = CostWeights(Q=Q, R=R, P=Q, Q_reg=Q, R_reg=R, P_reg=Q)
    meta = {"generator": "mass_spring_damper_chain", "L": L, "dt": dt, "m": m,
            "k_spring": k_spring, "d": d, "bound": bound}
    return RobustOcp(system, constraints, weights, meta)


def simulate_closed_loop(system: LtvSystem, x0, v, phi_u, w):
    """Roll out the uncertain dynamics under disturbance feedback.

    ``u[k] = v[k] + sum_{j<k} phi_u[j, k] w[j]`` where ``phi_u`` is laid out
    (N, N, nu, nw) with index ``[j, k]`` (a :class:`SystemResponse` is also
    accepted).  ``w`` is (N, nw) or a batch (S, N, nw).

    Returns ``(x, u)`` shaped (N+1, nx), (N, nu), with a leading batch axis
    when ``w`` is batched.
    """
    phi_u = getattr(phi_u, "phi_u", phi_u)
    N, nx, nu, nw = system.N, system.nx, system.nu, system.nw
    x0 = np.asarray(x0, dtype=float)
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    phi_u = np.asarray(phi_u, dtype=float)
    batched = w.ndim == 3
    if not batched:
        w = w[None]
    if x0.shape != (nx,):
        raise DimensionMismatch("x0", f"expected ({nx},), got {x0.shape}")
    if v.shape != (N, nu):
        raise DimensionMismatch("v", f"expected ({N}, {nu}), got {v.shape}")
    if w.shape[1:] != (N, nw):
        raise DimensionMismatch("w", f"expected (..., {N}, {nw}), got {w.shape}")
    if phi_u.shape != (N, N, nu, nw):
        raise DimensionMismatch("phi_u", f"expected ({N}, {N}, {nu}, {nw}), got {phi_u.shape}")

    S = w.shape[0]
    x = np.empty((S, N + 1, nx))
    u = np.empty((S, N, nu))
    x[:, 0] = x0
    for k in range(N):
        uk = np.broadcast_to(v[k], (S, nu)).copy()
        if k > 0:
            uk += np.einsum("jab,sjb->sa", phi_u[:k, k], w[:, :k])
        u[:, k] = uk
        x[:, k + 1] = x[:, k] @ system.A[k].T + uk @ system.B[k].T + w[:, k] @ system.E[k].T
    if not batched:
        return x[0], u[0]
    return x, u

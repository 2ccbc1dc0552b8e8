"""Controller subproblem: eta-weighted LQR per disturbance column.

For fixed duals ``eta`` the response maps minimise

    sum_j ||C_Nj Phi_x[N, j]||_F^2 + sum_{k>j} ||C_kj (Phi_x[k, j]; Phi_u[k, j])||_F^2

subject to ``Phi_x[k+1, j] = A_k Phi_x[k, j] + B_k Phi_u[k, j]`` and
``Phi_x[j+1, j] = E_j``.  Each column ``j`` decouples into an LQR problem
solved by one backward Riccati sweep and one forward propagation.

All response-type arrays are indexed ``[j, k]``; entries outside the valid
triangle (``k <= j``) are zero.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels as kern
from .errors import NegativeDual, SingularInnerMatrix
from .model import ConstraintSet, CostWeights, LtvSystem


@dataclass
class SystemResponse:
    """``phi_x`` (N, N+1, nx, nw) and ``phi_u`` (N, N, nu, nw), indexed ``[j, k]``."""

    phi_x: np.ndarray
    phi_u: np.ndarray

    @property
    def N(self) -> int:
        return self.phi_u.shape[0]

    def block(self, k: int, j: int) -> np.ndarray:
        """Stacked ``(Phi_x[k, j]; Phi_u[k, j])`` (``Phi_x`` only at ``k = N``)."""
        if k == self.N:
            return self.phi_x[j, k]
        return np.vstack([self.phi_x[j, k], self.phi_u[j, k]])


@dataclass
class GainSchedule:
    """``K`` (N, N, nu, nx) indexed ``[j, k]``; optional cost-to-go ``S`` (N, N+1, nx, nx)."""

    K: np.ndarray
    S: np.ndarray | None = None


@dataclass
class Tightening:
    """``beta`` (N, N, nc) indexed ``[j, k]`` and terminal ``beta_f`` (N, nf)."""

    beta: np.ndarray
    beta_f: np.ndarray
    eps_beta: float = 0.0

    @classmethod
    def zeros(cls, N: int, nc: int, nf: int, eps_beta: float = 0.0) -> "Tightening":
        return cls(np.zeros((N, N, nc)), np.zeros((N, nf)), eps_beta)


@dataclass
class DualField:
    """``eta`` (N, N, nc) indexed ``[j, k]`` and terminal ``eta_f`` (N, nf)."""

    eta: np.ndarray
    eta_f: np.ndarray

    @classmethod
    def zeros(cls, N: int, nc: int, nf: int) -> "DualField":
        return cls(np.zeros((N, N, nc)), np.zeros((N, nf)))


@dataclass
class StageTightening:
    """Per-stage back-off ``h^ct``: ``stage`` (N, nc) with row 0 zero, ``terminal`` (nf,)."""

    stage: np.ndarray
    terminal: np.ndarray

    @classmethod
    def zeros(cls, N: int, nc: int, nf: int) -> "StageTightening":
        return cls(np.zeros((N, nc)), np.zeros(nf))


@dataclass
class CostBlocks:
    """``Cx`` (N, N+1, nx, nx) with the terminal block at ``k = N``, ``Cu``, ``Cux``."""

    Cx: np.ndarray
    Cu: np.ndarray
    Cux: np.ndarray


def _split(G: np.ndarray, nx: int):
    return _c(G[..., :nx]), _c(G[..., nx:])


def stage_cost_blocks(eta, G, weights: CostWeights, terminal: bool = False):
    """Blocks of ``C'C`` for one stage: ``(Cx, Cu, Cux)``, or ``Cx`` alone if ``terminal``.

    ``G`` is the stage row matrix (nc, nx+nu), or ``Gf`` (nf, nx) for the
    terminal variant which uses ``P_reg``.
    """
    eta = np.asarray(eta, dtype=float)
    G = np.asarray(G, dtype=float)
    if np.any(eta < 0):
        raise NegativeDual(f"negative dual component {eta.min():.3e}")
    if terminal:
        return G.T @ (eta[:, None] * G) + weights.P_reg
    nx = weights.Q_reg.shape[0]
    Gx, Gu = G[:, :nx], G[:, nx:]
    Cx = Gx.T @ (eta[:, None] * Gx) + weights.Q_reg
    Cu = Gu.T @ (eta[:, None] * Gu) + weights.R_reg
    Cux = Gu.T @ (eta[:, None] * Gx)
    return Cx, Cu, Cux


def all_cost_blocks(system: LtvSystem, constraints: ConstraintSet, weights: CostWeights,
                    duals: DualField) -> CostBlocks:
    if np.any(duals.eta < 0) or np.any(duals.eta_f < 0):
        raise NegativeDual("dual field has negative components")
    N, nx, nu = system.N, system.nx, system.nu
    Gx, Gu = _split(constraints.cone_G, nx)
    Gf = _c(constraints.cone_Gf)
    Cx = np.zeros((N, N + 1, nx, nx))
    Cu = np.zeros((N, N, nu, nu))
    Cux = np.zeros((N, N, nu, nx))
    kern.cost_blocks_all(Gx, Gu, Gf, _c(duals.eta), _c(duals.eta_f),
                         _c(weights.Q_reg), _c(weights.R_reg),
                         _c(weights.P_reg), Cx, Cu, Cux)
    return CostBlocks(Cx, Cu, Cux)


def backward_riccati(system: LtvSystem, blocks: CostBlocks, j: int):
    """Gains ``K[k]`` and cost-to-go ``S[k]`` of column ``j`` for ``k = j+1..N-1`` (``S[N]`` terminal).

    ``blocks`` may be a :class:`CostBlocks` for all columns or a ``(Cx, Cu, Cux)``
    triple already sliced to column ``j``.  Returns ``(K, S, steps)``.
    """
    if isinstance(blocks, CostBlocks):
        Cx, Cu, Cux = blocks.Cx[j], blocks.Cu[j], blocks.Cux[j]
    else:
        Cx, Cu, Cux = (_c(b) for b in blocks)
    N, nx, nu = system.N, system.nx, system.nu
    K = np.zeros((N, nu, nx))
    S = np.zeros((N + 1, nx, nx))
    try:
        steps = kern.riccati_column(j, _c(system.A), _c(system.B), Cx, Cu, Cux, K, S)
    except np.linalg.LinAlgError:
        raise SingularInnerMatrix(f"Cu + B'SB not positive definite in column {j}") from None
    return K, S, steps


def disturbance_projector(E: np.ndarray) -> np.ndarray:
    """``Omega = E E^+`` via thin QR; the identity for square invertible ``E``."""
    Qf, _ = np.linalg.qr(np.asarray(E, dtype=float), mode="reduced")
    return Qf @ Qf.T


def forward_propagate(system: LtvSystem, K: np.ndarray, j: int):
    """Response column ``j`` from gains ``K`` (N, nu, nx): returns ``(phi_x, phi_u)``.

    ``Phi_u[k] = K[k] Phi_x[k]`` is the optimal response for every full
    column rank ``E_j``, square or not.
    """
    N, nx, nu, nw = system.N, system.nx, system.nu, system.nw
    phi_x = np.zeros((N + 1, nx, nw))
    phi_u = np.zeros((N, nu, nw))
    kern.forward_column(j, _c(system.A), _c(system.B), _c(system.E), _c(K),
                        phi_x, phi_u)
    return phi_x, phi_u


def _c(a):
    # writable contiguous copies keep one compiled specialisation per kernel
    return np.array(a, dtype=float, order="C")


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FASTSLS_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ControllerResult:
    gains: GainSchedule
    response: SystemResponse
    riccati_steps: int
    blocks: CostBlocks | None = None


def solve_controller(system: LtvSystem, constraints: ConstraintSet, weights: CostWeights,
                     duals: DualField, parallel: bool = False, workers: int | None = None,
                     blocks: CostBlocks | None = None, keep_blocks: bool = False) -> ControllerResult:
    """Minimise the eta-weighted response cost by N independent Riccati recursions.

    With ``parallel`` the columns are mapped over a thread pool (``workers`` or
    the ``FASTSLS_THREADS`` environment variable); each column writes a
    disjoint slice, so the result is identical to the sequential path.
    """
    if blocks is None:
        blocks = all_cost_blocks(system, constraints, weights, duals)
    N, nx, nu, nw = system.N, system.nx, system.nu, system.nw
    A, B, E = _c(system.A), _c(system.B), _c(system.E)
    K = np.zeros((N, N, nu, nx))
    S = np.zeros((N, N + 1, nx, nx))
    phi_x = np.zeros((N, N + 1, nx, nw))
    phi_u = np.zeros((N, N, nu, nw))
    try:
        if not parallel:
            steps = kern.riccati_forward_all(A, B, E, blocks.Cx, blocks.Cu, blocks.Cux, K, S, phi_x, phi_u)
        else:
            def column(j):
                n = kern.riccati_column(j, A, B, blocks.Cx[j], blocks.Cu[j], blocks.Cux[j], K[j], S[j])
                kern.forward_column(j, A, B, E, K[j], phi_x[j], phi_u[j])
                return n

            with ThreadPoolExecutor(max_workers=workers or _worker_count()) as pool:
                steps = sum(pool.map(column, range(N)))
    except np.linalg.LinAlgError:
        raise SingularInnerMatrix("Cu + B'SB not positive definite") from None
    return ControllerResult(GainSchedule(K, S), SystemResponse(phi_x, phi_u), int(steps),
                            blocks if keep_blocks else None)


def compute_beta(response: SystemResponse, constraints: ConstraintSet, eps_beta: float = 0.0) -> Tightening:
    """``beta[j, k, i] = ||g_ki' (Phi_x; Phi_u)[k, j]||^2`` and the terminal analogue."""
    N, _, nx, _ = response.phi_x.shape
    Gx, Gu = _split(constraints.cone_G, nx)
    Gf = _c(constraints.cone_Gf)
    beta = np.zeros((N, N, Gx.shape[1]))
    beta_f = np.zeros((N, Gf.shape[0]))
    kern.beta_all(Gx, Gu, Gf, _c(response.phi_x), _c(response.phi_u), beta, beta_f)
    return Tightening(beta, beta_f, eps_beta)


def compute_hct(tightening: Tightening, eps_beta: float | None = None) -> StageTightening:
    """``h_k = sum_{j<k} sqrt(beta[j, k] + eps)``; ``h_0 = 0``; terminal sums over all j."""
    eps = tightening.eps_beta if eps_beta is None else eps_beta
    beta, beta_f = tightening.beta, tightening.beta_f
    N = beta.shape[0]
    roots = np.sqrt(beta + eps)
    # only the strictly lower triangle k > j contributes
    mask = np.tril(np.ones((N, N), dtype=bool), -1).T  # mask[j, k] = k > j
    stage = np.where(mask[:, :, None], roots, 0.0).sum(axis=0)
    terminal = np.sqrt(beta_f + eps).sum(axis=0)
    return StageTightening(stage, terminal)

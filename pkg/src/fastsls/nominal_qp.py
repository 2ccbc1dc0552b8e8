"""Tightened nominal trajectory QP.

    min  sum_k z_k'Q z_k + v_k'R v_k + z_N'P z_N
    s.t. z_{k+1} = A_k z_k + B_k v_k,  z_0 = x0
         G_k (z_k, v_k) + b_k + hct_k <= 0,   Gf z_N + bf + hct_N <= 0

solved by a primal-dual interior-point method whose Newton systems are
factorised stage-wise with a Riccati recursion (O(N (nx^3 + nu^3)) per step).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .errors import DimensionMismatch, Infeasible, InvalidParameter, MaxIterations
from .model import RobustOcp
from .response import StageTightening

log = logging.getLogger(__name__)

SOLVED = "solved"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"
_STATUS = {kern.SOLVED: SOLVED, kern.MAX_ITER: MAX_ITER, kern.INFEASIBLE: INFEASIBLE}


@dataclass
class NominalSolution:
    """Primal trajectory with duals.

    ``lam[k]`` multiplies ``A_k z_k + B_k v_k - z_{k+1} = 0``; ``mu`` (N, nc) and
    ``mu_f`` (nf,) are the inequality multipliers in constraint-row order;
    ``slack`` is ``-(G (z, v) + b + hct)`` as seen by the solver.
    """

    z: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    mu_f: np.ndarray
    objective: float
    status: str = SOLVED
    iterations: int = 0
    slack: np.ndarray | None = None
    slack_f: np.ndarray | None = None

    @property
    def y(self) -> np.ndarray:
        """Concatenated ``(z, v)``."""
        return np.concatenate([self.z.ravel(), self.v.ravel()])


@dataclass
class QpSettings:
    tol_feas: float = 1e-9
    tol_comp: float = 1e-9
    max_iter: int = 100
    stall_limit: int = 10
    warm_start: NominalSolution | None = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.tol_feas > 0 and self.tol_comp > 0):
            raise InvalidParameter("QP tolerances must be positive")
        if self.max_iter < 1:
            raise InvalidParameter("max_iter must be at least 1")


@dataclass
class AffineTerms:
    """Optional affine data: dynamics drift ``c`` (N, nx) and linear costs ``q`` (N, nx), ``r`` (N, nu), ``p`` (nx,)."""

    c: np.ndarray | None = None
    q: np.ndarray | None = None
    r: np.ndarray | None = None
    p: np.ndarray | None = None


def _objective(ocp, z, v, aff):
    w = ocp.weights
    J = float(np.einsum("ki,ij,kj->", z[:-1], w.Q, z[:-1]) + np.einsum("ki,ij,kj->", v, w.R, v)
              + z[-1] @ w.P @ z[-1])
    if aff.q is not None:
        J += float(np.sum(aff.q * z[:-1]))
    if aff.r is not None:
        J += float(np.sum(aff.r * v))
    if aff.p is not None:
        J += float(aff.p @ z[-1])
    return J


def _data(ocp: RobustOcp, hct: StageTightening, aff: AffineTerms):
    s, c, w = ocp.system, ocp.constraints, ocp.weights
    N, nx, nu = s.N, s.nx, s.nu
    def C(a):
        return np.array(a, dtype=float, order="C")
    zeros = np.zeros
    return dict(
        A=C(s.A), B=C(s.B),
        c=C(aff.c) if aff.c is not None else zeros((N, nx)),
        Q=C(w.Q), R=C(w.R), P=C(w.P),
        q=C(aff.q) if aff.q is not None else zeros((N, nx)),
        r=C(aff.r) if aff.r is not None else zeros((N, nu)),
        p=C(aff.p) if aff.p is not None else zeros(nx),
        Gx=C(c.G[:, :, :nx]), Gu=C(c.G[:, :, nx:]),
        d=C(c.b + hct.stage), Gf=C(c.Gf), df=C(c.bf + hct.terminal),
    )


def _rollout(ocp, x0, v, c):
    N = ocp.N
    z = np.empty((N + 1, ocp.nx))
    z[0] = x0
    for k in range(N):
        z[k + 1] = ocp.system.A[k] @ z[k] + ocp.system.B[k] @ v[k] + c[k]
    return z


def _initial_point(ocp, x0, data, warm: NominalSolution | None):
    N, nx, nu, nc, nf = ocp.N, ocp.nx, ocp.nu, ocp.nc, ocp.nf
    if warm is not None and warm.z.shape == (N + 1, nx):
        z = warm.z.copy()
        z[0] = x0
        v = warm.v.copy()
        lam = warm.lam.copy()
        mu = np.maximum(warm.mu, 1e-6)
        mu_f = np.maximum(warm.mu_f, 1e-6)
        floor = 1e-6
    else:
        v = np.zeros((N, nu))
        z = _rollout(ocp, x0, v, data["c"])
        if not np.all(np.isfinite(z)) or np.abs(z).max() > 1e8:
            z = np.zeros((N + 1, nx))
            z[0] = x0
        lam = np.zeros((N, nx))
        mu = np.ones((N, nc))
        mu_f = np.ones(nf)
        floor = 1.0
    g = np.einsum("kij,kj->ki", data["Gx"], z[:-1]) + np.einsum("kij,kj->ki", data["Gu"], v) + data["d"]
    gf = data["Gf"] @ z[-1] + data["df"]
    s = np.maximum(-g, floor)
    s_f = np.maximum(-gf, floor)
    return z, v, lam, mu, mu_f, s, s_f


def _constant_row_violation(ocp, x0, data, tol):
    """Stage-0 rows without input coefficients are constants once x0 is fixed."""
    Gu0 = data["Gu"][0]
    const = np.all(Gu0 == 0.0, axis=1)
    if not np.any(const):
        return None
    val = data["Gx"][0] @ x0 + data["d"][0]
    bad = np.flatnonzero(const & (val > tol))
    return bad if bad.size else None


def solve_nominal(ocp: RobustOcp, x0, hct: StageTightening | None = None,
                  settings: QpSettings | None = None, affine: AffineTerms | None = None,
                  raise_on_failure: bool = True) -> NominalSolution:
    """Solve the tightened nominal QP from initial state ``x0``.

    Raises :class:`Infeasible` or :class:`MaxIterations` unless
    ``raise_on_failure`` is False, in which case the last iterate is returned
    with the corresponding ``status``.
    """
    settings = settings or QpSettings()
    affine = affine or AffineTerms()
    N, nx, nc, nf = ocp.N, ocp.nx, ocp.nc, ocp.nf
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (nx,):
        raise DimensionMismatch("x0", f"expected ({nx},), got {x0.shape}")
    if hct is None:
        hct = StageTightening.zeros(N, nc, nf)
    if hct.stage.shape != (N, nc) or hct.terminal.shape != (nf,):
        raise DimensionMismatch("hct", f"expected ({N}, {nc}) and ({nf},)")
    data = _data(ocp, hct, affine)

    bad = _constant_row_violation(ocp, x0, data, settings.tol_feas)
    if bad is not None:
        msg = f"initial state violates stage-0 rows {bad.tolist()}"
        if raise_on_failure:
            raise Infeasible(msg)
        return _failed(ocp, x0, INFEASIBLE)

    attempts = [settings.warm_start, None] if settings.warm_start is not None else [None]
    for warm in attempts:
        z, v, lam, mu, mu_f, s, s_f = _initial_point(ocp, x0, data, warm)
        try:
            code, iters, stat, feas, comp = kern.qp_ipm(
                data["A"], data["B"], data["c"], data["Q"], data["R"], data["P"],
                data["q"], data["r"], data["p"], data["Gx"], data["Gu"], data["d"],
                data["Gf"], data["df"], z, v, lam, mu, mu_f, s, s_f,
                settings.tol_feas, settings.tol_comp, settings.max_iter, settings.stall_limit)
        except np.linalg.LinAlgError:
            # a breakdown of the factorisation says nothing about feasibility
            code, iters = kern.MAX_ITER, -1
        status = _STATUS[code]
        log.debug("nominal QP: %s after %d iterations (warm=%s)", status, iters, warm is not None)
        if status == SOLVED:
            break
    if status != SOLVED:
        if raise_on_failure:
            if status == INFEASIBLE:
                raise Infeasible("tightened nominal QP is infeasible")
            raise MaxIterations(f"nominal QP did not converge in {settings.max_iter} iterations")
        sol = _failed(ocp, x0, status)
        sol.iterations = iters
        return sol

    # rows identified inactive (mu < slack) whose multiplier is below the
    # complementarity tolerance carry no dual information
    mu = np.where((mu < s) & (mu <= settings.tol_comp), 0.0, np.maximum(mu, 0.0))
    mu_f = np.where((mu_f < s_f) & (mu_f <= settings.tol_comp), 0.0, np.maximum(mu_f, 0.0))
    z[0] = x0
    return NominalSolution(z=z, v=v, lam=lam, mu=mu, mu_f=mu_f,
                           objective=_objective(ocp, z, v, affine), status=SOLVED,
                           iterations=iters, slack=s, slack_f=s_f)


def _failed(ocp, x0, status):
    N, nx, nu, nc, nf = ocp.N, ocp.nx, ocp.nu, ocp.nc, ocp.nf
    z = np.full((N + 1, nx), np.nan)
    z[0] = x0
    return NominalSolution(z=z, v=np.full((N, nu), np.nan), lam=np.full((N, nx), np.nan),
                           mu=np.full((N, nc), np.nan), mu_f=np.full(nf, np.nan),
                           objective=np.nan, status=status)


def kkt_residuals(ocp: RobustOcp, x0, hct: StageTightening, sol: NominalSolution,
                  affine: AffineTerms | None = None) -> dict:
    """Independent evaluation of the QP optimality conditions (infinity norms).

    Keys: ``stationarity``, ``dynamics``, ``primal`` (tightened-inequality
    violation), ``dual`` (negative multiplier magnitude), ``complementarity``
    (max ``mu * |row value|``), ``initial`` (``z_0`` mismatch).
    """
    affine = affine or AffineTerms()
    s, c, w = ocp.system, ocp.constraints, ocp.weights
    N, nx = s.N, s.nx
    z, v, lam, mu, mu_f = sol.z, sol.v, sol.lam, sol.mu, sol.mu_f
    q = affine.q if affine.q is not None else np.zeros((N, nx))
    r = affine.r if affine.r is not None else np.zeros((N, s.nu))
    p = affine.p if affine.p is not None else np.zeros(nx)
    drift = affine.c if affine.c is not None else np.zeros((N, nx))
    stat = 0.0
    for k in range(N):
        gu = 2 * w.R @ v[k] + r[k] + s.B[k].T @ lam[k] + c.G[k][:, nx:].T @ mu[k]
        stat = max(stat, np.abs(gu).max(initial=0.0))
        if k > 0:
            gx = 2 * w.Q @ z[k] + q[k] + s.A[k].T @ lam[k] - lam[k - 1] + c.G[k][:, :nx].T @ mu[k]
            stat = max(stat, np.abs(gx).max(initial=0.0))
    gN = 2 * w.P @ z[N] + p - lam[N - 1] + c.Gf.T @ mu_f
    stat = max(stat, np.abs(gN).max(initial=0.0))
    dyn = max(np.abs(s.A[k] @ z[k] + s.B[k] @ v[k] + drift[k] - z[k + 1]).max() for k in range(N))
    rows = np.stack([c.G[k] @ np.concatenate([z[k], v[k]]) + c.b[k] + hct.stage[k] for k in range(N)])
    rows_f = c.Gf @ z[N] + c.bf + hct.terminal
    allrows = np.concatenate([rows.ravel(), rows_f])
    allmu = np.concatenate([mu.ravel(), mu_f])
    return {
        "stationarity": float(stat),
        "dynamics": float(dyn),
        "primal": float(max(allrows.max(initial=-np.inf), 0.0)),
        "dual": float(max(-allmu.min(initial=0.0), 0.0)),
        "complementarity": float(np.abs(allmu * allrows).max(initial=0.0)),
        "initial": float(np.abs(z[0] - np.asarray(x0)).max()),
    }

"""Independent correctness oracles.

None of the checks here reuse the Riccati recursion: the controller oracle
solves the dense KKT system of one column, the SOCP check evaluates exact
norms (no ``eps_beta``), and the robustness check simulates the uncertain
plant directly.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionMismatch, InsufficientHistory, SingularKkt
from .model import ConstraintSet, CostWeights, LtvSystem, RobustOcp, simulate_closed_loop
from .nominal_qp import AffineTerms, NominalSolution, kkt_residuals
from .response import (
    DualField,
    StageTightening,
    SystemResponse,
    Tightening,
    all_cost_blocks,
    compute_hct,
)

FEAS_TOL = 1e-6
ORACLE_TOL = 1e-8
COMP_TOL = 1e-6
SHARD_SIZE = 2048


@dataclass
class VerificationReport:
    """Residuals of the robust problem and Monte-Carlo counts.

    ``socp_residual`` is the largest positive cone-constraint value,
    ``dynamics_residual`` the nominal one and ``response_residual`` the
    propagation residual of the response.  ``samples`` is None when the
    robustness check was skipped.
    """

    socp_residual: float = 0.0
    dynamics_residual: float = 0.0
    response_residual: float = 0.0
    complementarity: float | None = None
    samples: int | None = None
    violations: int = 0
    max_sample_violation: float | None = None
    tol: float = FEAS_TOL
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v in (True, "skipped") for v in self.checks.values())

    def merge(self, other: "VerificationReport") -> "VerificationReport":
        out = VerificationReport(**{k: v for k, v in asdict(self).items() if k != "checks"})
        out.checks = dict(self.checks)
        for name in ("socp_residual", "dynamics_residual", "response_residual"):
            setattr(out, name, max(getattr(self, name), getattr(other, name)))
        for name in ("complementarity", "samples", "max_sample_violation"):
            if getattr(other, name) is not None:
                setattr(out, name, getattr(other, name))
        out.violations = max(self.violations, other.violations)
        out.checks.update(other.checks)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


# ---------------------------------------------------------------------------
# dense controller oracle
# ---------------------------------------------------------------------------


def dense_controller_oracle(system: LtvSystem, constraints: ConstraintSet, weights: CostWeights,
                            duals: DualField, j: int):
    """Minimiser of the column-``j`` response cost by one dense KKT solve.

    Unknowns are ``Phi_x[k]`` for ``k = j+1..N`` and ``Phi_u[k]`` for
    ``k = j+1..N-1``; the ``nw`` disturbance directions share the KKT matrix
    and are solved as simultaneous right-hand sides.

    Returns
    -------
    phi_x : (N+1, nx, nw) with zero rows for ``k <= j``
    phi_u : (N, nu, nw) with zero rows for ``k <= j``
    """
    N, nx, nu, nw = system.N, system.nx, system.nu, system.nw
    if not 0 <= j < N:
        raise DimensionMismatch("j", f"column index {j} outside [0, {N})")
    blocks = all_cost_blocks(system, constraints, weights, duals)
    Cx, Cu, Cux = blocks.Cx[j], blocks.Cu[j], blocks.Cux[j]

    ns = N - j                      # states k = j+1..N
    ni = N - j - 1                  # inputs k = j+1..N-1
    nvar = ns * nx + ni * nu
    xi = lambda k: slice((k - j - 1) * nx, (k - j) * nx)
    ui = lambda k: slice(ns * nx + (k - j - 1) * nu, ns * nx + (k - j) * nu)

    H = np.zeros((nvar, nvar))
    for k in range(j + 1, N):
        H[xi(k), xi(k)] = Cx[k]
        H[ui(k), ui(k)] = Cu[k]
        H[ui(k), xi(k)] = Cux[k]
        H[xi(k), ui(k)] = Cux[k].T
    H[xi(N), xi(N)] = Cx[N]

    # initial block and dynamics rows
    Aeq = np.zeros((ns * nx, nvar))
    rhs = np.zeros((ns * nx, nw))
    Aeq[:nx, xi(j + 1)] = np.eye(nx)
    rhs[:nx] = system.E[j]
    for r, k in enumerate(range(j + 1, N), start=1):
        rows = slice(r * nx, (r + 1) * nx)
        Aeq[rows, xi(k + 1)] = np.eye(nx)
        Aeq[rows, xi(k)] = -system.A[k]
        Aeq[rows, ui(k)] = -system.B[k]

    m = Aeq.shape[0]
    KKT = np.block([[2.0 * H, Aeq.T], [Aeq, np.zeros((m, m))]])
    R = np.vstack([np.zeros((nvar, nw)), rhs])
    try:
        sol = np.linalg.solve(KKT, R)
    except np.linalg.LinAlgError:
        raise SingularKkt(f"dense KKT system of column {j} is singular") from None
    if not np.all(np.isfinite(sol)):
        raise SingularKkt(f"dense KKT solve of column {j} produced non-finite values")

    phi_x = np.zeros((N + 1, nx, nw))
    phi_u = np.zeros((N, nu, nw))
    for k in range(j + 1, N + 1):
        phi_x[k] = sol[xi(k)]
    for k in range(j + 1, N):
        phi_u[k] = sol[ui(k)]
    return phi_x, phi_u


def response_cost(system: LtvSystem, constraints: ConstraintSet, weights: CostWeights,
                  duals: DualField, response: SystemResponse) -> float:
    """Value of the eta-weighted response objective summed over all columns."""
    blocks = all_cost_blocks(system, constraints, weights, duals)
    N = system.N
    total = 0.0
    for j in range(N):
        for k in range(j + 1, N):
            px, pu = response.phi_x[j, k], response.phi_u[j, k]
            total += np.sum(px * (blocks.Cx[j, k] @ px)) + np.sum(pu * (blocks.Cu[j, k] @ pu))
            total += 2.0 * np.sum(pu * (blocks.Cux[j, k] @ px))
        px = response.phi_x[j, N]
        total += np.sum(px * (blocks.Cx[j, N] @ px))
    return float(total)


def controller_stationarity(system: LtvSystem, constraints: ConstraintSet, weights: CostWeights,
                            duals: DualField, response: SystemResponse) -> float:
    """Largest input-gradient of the response cost after eliminating the states.

    A backward adjoint sweep per column; zero exactly at the minimiser for
    ``duals``.  Scaled by the largest cost-block norm so the value is
    comparable across instances.
    """
    blocks = all_cost_blocks(system, constraints, weights, duals)
    N = system.N
    worst = 0.0
    scale = 1.0
    for j in range(N):
        lam = 2.0 * blocks.Cx[j, N] @ response.phi_x[j, N]
        for k in range(N - 1, j, -1):
            px, pu = response.phi_x[j, k], response.phi_u[j, k]
            g = 2.0 * (blocks.Cu[j, k] @ pu + blocks.Cux[j, k] @ px) + system.B[k].T @ lam
            worst = max(worst, float(np.abs(g).max(initial=0.0)))
            scale = max(scale, float(np.abs(blocks.Cx[j, k]).max()))
            lam = 2.0 * (blocks.Cx[j, k] @ px + blocks.Cux[j, k].T @ pu) + system.A[k].T @ lam
    return worst / scale


# ---------------------------------------------------------------------------
# robust feasibility
# ---------------------------------------------------------------------------


def cone_rows(ocp: RobustOcp, nominal: NominalSolution, response: SystemResponse):
    """Robust constraint values with exact norms: ``(stage (N, nc), terminal (nf,))``.

    Row ``i`` of stage ``k`` is ``g'(z_k, v_k) + b + sum_{j<k} ||g_cone' Phi[k, j]||``.
    """
    c = ocp.constraints
    N, nx = ocp.N, ocp.nx
    Gc, Gfc = c.cone_G, c.cone_Gf
    stage = np.empty((N, ocp.nc))
    for k in range(N):
        stage[k] = c.G[k] @ np.concatenate([nominal.z[k], nominal.v[k]]) + c.b[k]
        for j in range(k):
            M = Gc[k][:, :nx] @ response.phi_x[j, k] + Gc[k][:, nx:] @ response.phi_u[j, k]
            stage[k] += np.linalg.norm(M, axis=1)
    terminal = c.Gf @ nominal.z[N] + c.bf
    for j in range(N):
        terminal += np.linalg.norm(Gfc @ response.phi_x[j, N], axis=1)
    return stage, terminal


def response_residual(system: LtvSystem, response: SystemResponse) -> float:
    """Largest Frobenius residual of the propagation recursion and the zero pattern."""
    N = system.N
    px, pu = response.phi_x, response.phi_u
    worst = 0.0
    for j in range(N):
        worst = max(worst, np.linalg.norm(px[j, j + 1] - system.E[j]))
        for k in range(j + 1, N):
            worst = max(worst, np.linalg.norm(px[j, k + 1] - system.A[k] @ px[j, k] - system.B[k] @ pu[j, k]))
        # blocks that precede the disturbance must vanish
        worst = max(worst, np.abs(px[j, :j + 1]).max(initial=0.0), np.abs(pu[j, :j + 1]).max(initial=0.0))
    return float(worst)


def dynamics_residual(ocp: RobustOcp, x0, nominal: NominalSolution, affine: AffineTerms | None = None) -> float:
    s = ocp.system
    drift = affine.c if affine is not None and affine.c is not None else np.zeros((ocp.N, ocp.nx))
    r = np.abs(nominal.z[0] - np.asarray(x0, dtype=float)).max()
    for k in range(ocp.N):
        r = max(r, np.abs(nominal.z[k + 1] - s.A[k] @ nominal.z[k] - s.B[k] @ nominal.v[k] - drift[k]).max())
    return float(r)


def check_socp_feasibility(ocp: RobustOcp, x0, nominal: NominalSolution, response: SystemResponse,
                           tol: float = FEAS_TOL, affine: AffineTerms | None = None) -> VerificationReport:
    """Evaluate every constraint of the robust SOCP at ``(nominal, response)``."""
    if not np.all(np.isfinite(nominal.z)) or not np.all(np.isfinite(nominal.v)):
        rep = VerificationReport(socp_residual=np.inf, dynamics_residual=np.inf, tol=tol)
        rep.checks = {"socp": False, "dynamics": False, "response": False}
        return rep
    stage, terminal = cone_rows(ocp, nominal, response)
    socp = float(max(stage.max(initial=-np.inf), terminal.max(initial=-np.inf), 0.0))
    dyn = dynamics_residual(ocp, x0, nominal, affine)
    resp = response_residual(ocp.system, response)
    rep = VerificationReport(socp_residual=socp, dynamics_residual=dyn, response_residual=resp, tol=tol)
    rep.checks = {"socp": socp <= tol, "dynamics": dyn <= tol, "response": resp <= tol}
    return rep


def _shard_counts(n_samples: int, shard_size: int):
    full, rest = divmod(n_samples, shard_size)
    return [shard_size] * full + ([rest] if rest else [])


def _sphere(rng, shape):
    w = rng.standard_normal(shape)
    return w / np.linalg.norm(w, axis=-1, keepdims=True)


def _shard_violation(ocp, x0, v, phi_u, seed, shard, count, include_zero, tol):
    rng = np.random.default_rng([seed, shard])
    w = _sphere(rng, (count, ocp.N, ocp.nw))
    if include_zero:
        w[0] = 0.0
    x, u = simulate_closed_loop(ocp.system, x0, v, phi_u, w)
    c = ocp.constraints
    xu = np.concatenate([x[:, :-1], u], axis=2)
    rows = np.einsum("kiz,skz->ski", c.G, xu) + c.b
    rows_f = x[:, -1] @ c.Gf.T + c.bf
    worst = np.maximum(rows.max(axis=(1, 2)), rows_f.max(axis=1, initial=-np.inf))
    return int(np.sum(worst > tol)), float(worst.max())


def monte_carlo_robustness(ocp: RobustOcp, x0, solution, n_samples: int = 10_000, seed: int = 0,
                           tol: float = 1e-9, workers: int = 1, include_zero: bool = True,
                           shard_size: int = SHARD_SIZE) -> VerificationReport:
    """Simulate the closed loop under sphere-sampled disturbances and count violations.

    ``solution`` is an :class:`~fastsls.fast_sls.SlsSolution` (its certified
    pair is used) or a ``(nominal, response)`` tuple.  Samples are split in
    fixed-size shards seeded by ``(seed, shard index)``, so the report does
    not depend on ``workers``.  The first sample is ``w = 0`` when
    ``include_zero``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if isinstance(solution, tuple):
        nominal, response = solution
    else:
        nominal, response = solution.nominal, solution.certified_response
    x0 = np.asarray(x0, dtype=float)
    counts = _shard_counts(n_samples, shard_size)
    args = [(ocp, x0, nominal.v, response.phi_u, seed, i, n, include_zero and i == 0, tol)
            for i, n in enumerate(counts)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _shard_violation(*a), args))
    else:
        results = [_shard_violation(*a) for a in args]
    violations = sum(r[0] for r in results)
    worst = max(r[1] for r in results)
    rep = VerificationReport(samples=n_samples, violations=violations, max_sample_violation=worst, tol=tol)
    rep.checks = {"robustness": violations == 0}
    return rep


# ---------------------------------------------------------------------------
# optimality
# ---------------------------------------------------------------------------


def check_complementarity(ocp: RobustOcp, nominal: NominalSolution, tightening, eps_beta: float = 0.0,
                          tol: float = COMP_TOL):
    """``max_i mu_i |g_i'(z, v) + b_i + hct_i|`` over stage and terminal rows.

    ``tightening`` is a :class:`Tightening` (turned into per-stage values with
    ``eps_beta``) or a ready :class:`StageTightening`.  Returns
    ``(value, passed)``.
    """
    hct = tightening if isinstance(tightening, StageTightening) else compute_hct(tightening, eps_beta)
    c = ocp.constraints
    worst = 0.0
    for k in range(ocp.N):
        row = c.G[k] @ np.concatenate([nominal.z[k], nominal.v[k]]) + c.b[k] + hct.stage[k]
        worst = max(worst, float(np.abs(nominal.mu[k] * row).max(initial=0.0)))
    row = c.Gf @ nominal.z[ocp.N] + c.bf + hct.terminal
    worst = max(worst, float(np.abs(nominal.mu_f * row).max(initial=0.0)))
    return worst, worst <= tol


def estimate_convergence_rate(history) -> np.ndarray:
    """Ratios ``||y_{i+1} - y_last|| / ||y_i - y_last||`` (infinity norm).

    ``history`` is a sequence of iterates ``y_i`` or an object with a
    ``y_history`` attribute.  Entries with a zero denominator are skipped.
    """
    ys = getattr(history, "y_history", history)
    ys = [np.asarray(y, dtype=float).ravel() for y in ys]
    if len(ys) < 3:
        raise InsufficientHistory(f"need at least 3 iterates, got {len(ys)}")
    last = ys[-1]
    err = np.array([np.abs(y - last).max() for y in ys])
    num, den = err[1:], err[:-1]
    keep = den > 0
    return num[keep] / den[keep]


def kkt_bundle(ocp: RobustOcp, x0, solution, affine: AffineTerms | None = None) -> dict:
    """Residuals of the joint optimality system at a fast-SLS bundle.

    ``qp_*`` entries come from the tightened QP solved with the enforced
    tightening; ``tightening_gap`` is the largest violation of the QP rows
    when the final tightening replaces it; ``dual_map`` is the mismatch
    ``||eta - mu / (2 sqrt(beta + eps))||`` at the final ``beta``;
    ``controller`` is the scaled input-gradient of the response cost.
    """
    from .fast_sls import tightening_residual

    eps = solution.tightening.eps_beta
    enforced = solution.enforced if solution.enforced is not None else solution.tightening
    hct_enf = compute_hct(enforced, eps)
    qp = kkt_residuals(ocp, x0, hct_enf, solution.nominal, affine)
    hct_fin = compute_hct(solution.tightening, eps)
    c, nom = ocp.constraints, solution.nominal
    gap = 0.0
    for k in range(ocp.N):
        row = c.G[k] @ np.concatenate([nom.z[k], nom.v[k]]) + c.b[k] + hct_fin.stage[k]
        gap = max(gap, float(row.max(initial=0.0)))
    gap = max(gap, float((c.Gf @ nom.z[ocp.N] + c.bf + hct_fin.terminal).max(initial=0.0)))
    comp, _ = check_complementarity(ocp, nom, hct_fin)
    out = {f"qp_{k}": float(v) for k, v in qp.items()}
    out["tightening_gap"] = gap
    out["complementarity"] = comp
    out["dual_map"] = tightening_residual(nom.mu, nom.mu_f, solution.duals, solution.tightening, eps)
    out["controller"] = controller_stationarity(ocp.system, ocp.constraints, ocp.weights,
                                                solution.duals, solution.response)
    return out


def verify_solution(ocp: RobustOcp, x0, solution, n_samples: int = 10_000, seed: int = 0,
                    tol: float = FEAS_TOL, comp_tol: float = COMP_TOL, workers: int = 1) -> VerificationReport:
    """All checks on one solution; ``n_samples = 0`` skips the robustness check."""
    nominal = solution.nominal
    rep = check_socp_feasibility(ocp, x0, nominal, solution.certified_response, tol)
    comp, ok = check_complementarity(ocp, nominal, solution.enforced or solution.tightening,
                                     solution.tightening.eps_beta, comp_tol)
    rep.complementarity = comp
    rep.checks["complementarity"] = ok
    if n_samples > 0:
        rep = rep.merge(monte_carlo_robustness(ocp, x0, solution, n_samples, seed, workers=workers))
    else:
        rep.checks["robustness"] = "skipped"
    return rep

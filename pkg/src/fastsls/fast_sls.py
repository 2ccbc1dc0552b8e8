"""Alternating nominal-QP / Riccati solver for the robust SLS problem.

Each iteration solves the tightened nominal QP, maps its inequality duals to
the tightening duals ``eta``, re-solves the controller with N Riccati
recursions and re-evaluates the tightening.  Iterates stop when consecutive
nominal trajectories agree to ``eps_m`` in the infinity norm.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, Infeasible, InvalidParameter, MaxIterations
from .model import RobustOcp, simulate_closed_loop
from .nominal_qp import AffineTerms, NominalSolution, QpSettings, solve_nominal
from .response import (
    DualField,
    GainSchedule,
    StageTightening,
    SystemResponse,
    Tightening,
    all_cost_blocks,
    compute_beta,
    compute_hct,
    solve_controller,
)

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"

PHASES = ("qp", "dual", "riccati", "tightening")


@dataclass
class SolverConfig:
    """Outer-loop settings.

    ``init`` selects the first tightening: ``"lqr"`` uses the response of the
    eta = 0 controller (falling back to ``"eps"`` if the first QP is then
    infeasible), ``"eps"`` starts from beta = 0 so only the ``eps_beta``
    floor tightens the first QP.  ``stopping="kkt"`` additionally requires
    the fixed-point residual of the tightening to be below ``kkt_tol``.
    """

    eps_m: float = 1e-8
    eps_beta: float = 1e-10
    max_iterations: int = 50
    parallel: bool = False
    workers: int | None = None
    qp: QpSettings = field(default_factory=QpSettings)
    init: str = "lqr"
    stopping: str = "primal"
    kkt_tol: float = 1e-6
    record_history: bool = False

    def __post_init__(self):
        if not self.eps_m > 0:
            raise InvalidParameter(f"eps_m must be positive, got {self.eps_m}")
        if not self.eps_beta > 0:
            raise InvalidParameter(f"eps_beta must be positive, got {self.eps_beta}")
        if self.max_iterations < 1:
            raise InvalidParameter("max_iterations must be at least 1")
        if self.init not in ("lqr", "eps"):
            raise InvalidParameter(f"unknown init {self.init!r}")
        if self.stopping not in ("primal", "kkt"):
            raise InvalidParameter(f"unknown stopping rule {self.stopping!r}")


@dataclass
class IterateRecord:
    """Snapshot of one iteration.

    ``enforced`` is the tightening the QP of this iteration was solved with
    and ``enforced_response`` the response that produced it (None for the
    ``eps`` start), so ``(nominal, enforced_response)`` is the pair that is
    feasible for the robust problem.
    """

    iteration: int
    nominal: NominalSolution
    duals: DualField
    response: SystemResponse
    tightening: Tightening
    enforced: Tightening
    enforced_response: SystemResponse | None
    step: float


@dataclass
class SlsSolution:
    nominal: NominalSolution
    gains: GainSchedule
    response: SystemResponse
    tightening: Tightening
    duals: DualField
    iterations: int
    timings: dict
    status: str
    x0: np.ndarray
    hct: StageTightening | None = None
    enforced: Tightening | None = None
    y_history: list = field(default_factory=list)
    history: list = field(default_factory=list)
    riccati_steps: list = field(default_factory=list)
    init: str = "lqr"
    failed_iteration: int | None = None
    enforced_response: SystemResponse | None = None

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    @property
    def certified_response(self) -> SystemResponse:
        """Response whose tightening the returned nominal satisfies.

        ``(nominal, certified_response)`` is feasible for the robust problem
        at every iterate; at convergence it agrees with ``response`` to the
        stopping tolerance.  An ``eps`` start stopped after its first
        iteration has no certifying response and falls back to ``response``.
        """
        return self.enforced_response if self.enforced_response is not None else self.response

    @property
    def v0(self) -> np.ndarray:
        return self.nominal.v[0]


def update_duals(mu, mu_f, beta_bar: Tightening, eps_beta: float) -> DualField:
    """``eta[j, k] = mu[k] / (2 sqrt(beta[j, k] + eps))`` for ``k > j`` and the terminal analogue."""
    mu = np.asarray(mu, dtype=float)
    mu_f = np.asarray(mu_f, dtype=float)
    beta, beta_f = beta_bar.beta, beta_bar.beta_f
    N = beta.shape[0]
    if mu.shape != (N, beta.shape[2]) or mu_f.shape != (beta_f.shape[1],):
        raise DimensionMismatch("mu", f"expected ({N}, {beta.shape[2]}) and ({beta_f.shape[1]},)")
    eta = mu[None, :, :] / (2.0 * np.sqrt(beta + eps_beta))
    mask = np.triu(np.ones((N, N), dtype=bool), 1)  # mask[j, k] = k > j
    eta = np.where(mask[:, :, None], eta, 0.0)
    eta_f = mu_f[None, :] / (2.0 * np.sqrt(beta_f + eps_beta))
    return DualField(eta, eta_f)


def tightening_residual(mu, mu_f, duals: DualField, beta: Tightening, eps_beta: float) -> float:
    """Infinity-norm mismatch between ``eta`` and the dual map evaluated at ``beta``."""
    ref = update_duals(mu, mu_f, beta, eps_beta)
    return float(max(np.abs(duals.eta - ref.eta).max(initial=0.0),
                     np.abs(duals.eta_f - ref.eta_f).max(initial=0.0)))


def _initial_tightening(ocp: RobustOcp, config: SolverConfig, mode: str):
    N, nc, nf = ocp.N, ocp.nc, ocp.nf
    if mode == "eps":
        # no controller produced this tightening, so no dual matches it
        return Tightening.zeros(N, nc, nf, config.eps_beta), None, None
    zero = DualField.zeros(N, nc, nf)
    ctrl = solve_controller(ocp.system, ocp.constraints, ocp.weights, zero,
                            parallel=config.parallel, workers=config.workers)
    return compute_beta(ctrl.response, ocp.constraints, config.eps_beta), ctrl.response, zero


def solve(ocp: RobustOcp, x0, config: SolverConfig | None = None,
          affine: AffineTerms | None = None, warm_start: NominalSolution | None = None) -> SlsSolution:
    """Run the alternating scheme from initial state ``x0``.

    Raises :class:`Infeasible` (with ``iteration=1``) when no iterate exists;
    later infeasibility returns the last feasible bundle with status
    ``"infeasible"``.  Hitting ``max_iterations`` returns the last bundle with
    status ``"max-iter"``.
    """
    config = config or SolverConfig()
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (ocp.nx,):
        raise DimensionMismatch("x0", f"expected ({ocp.nx},), got {x0.shape}")
    modes = [config.init, "eps"] if config.init == "lqr" else ["eps"]
    for n_try, mode in enumerate(modes):
        try:
            return _solve(ocp, x0, config, affine, warm_start, mode)
        except Infeasible as exc:
            if exc.iteration != 1 or n_try == len(modes) - 1:
                raise
            log.debug("first QP infeasible under %s tightening; retrying with eps start", mode)
    raise AssertionError("unreachable")


def _solve(ocp, x0, config, affine, warm_start, mode) -> SlsSolution:
    timings = {p: 0 for p in PHASES}
    tic = time.perf_counter_ns()
    enforced, enforced_resp, eta_prev = _initial_tightening(ocp, config, mode)
    timings["riccati"] += time.perf_counter_ns() - tic

    sysm, cons, w = ocp.system, ocp.constraints, ocp.weights
    prev = None
    y_prev = None
    y_hist, hist, steps_hist = [], [], []
    status = MAX_ITER
    failed = None
    warm = warm_start
    for it in range(1, config.max_iterations + 1):
        hct = compute_hct(enforced, config.eps_beta)
        tic = time.perf_counter_ns()
        try:
            nominal = solve_nominal(ocp, x0, hct, replace(config.qp, warm_start=warm), affine)
        except (Infeasible, MaxIterations) as exc:
            timings["qp"] += time.perf_counter_ns() - tic
            if prev is None:
                if isinstance(exc, Infeasible):
                    raise Infeasible(str(exc), iteration=it) from None
                raise
            status = INFEASIBLE if isinstance(exc, Infeasible) else MAX_ITER
            failed = it
            break
        timings["qp"] += time.perf_counter_ns() - tic

        tic = time.perf_counter_ns()
        duals = update_duals(nominal.mu, nominal.mu_f, enforced, config.eps_beta)
        blocks = all_cost_blocks(sysm, cons, w, duals)
        timings["dual"] += time.perf_counter_ns() - tic

        tic = time.perf_counter_ns()
        ctrl = solve_controller(sysm, cons, w, duals, parallel=config.parallel,
                                workers=config.workers, blocks=blocks)
        timings["riccati"] += time.perf_counter_ns() - tic

        tic = time.perf_counter_ns()
        beta = compute_beta(ctrl.response, cons, config.eps_beta)
        timings["tightening"] += time.perf_counter_ns() - tic

        y = nominal.y
        step = np.inf if y_prev is None else float(np.abs(y - y_prev).max())
        y_hist.append(y)
        steps_hist.append(ctrl.riccati_steps)
        if config.record_history:
            hist.append(IterateRecord(it, nominal, duals, ctrl.response, beta, enforced, enforced_resp, step))
        prev = (nominal, duals, ctrl, beta, hct, enforced, enforced_resp, it)

        # identical duals give an identical controller, hence an identical
        # next QP: the pair is already a fixed point
        fixed = (eta_prev is not None and np.array_equal(duals.eta, eta_prev.eta)
                 and np.array_equal(duals.eta_f, eta_prev.eta_f))
        done = step <= config.eps_m or fixed
        if done and config.stopping == "kkt" and not fixed:
            done = tightening_residual(nominal.mu, nominal.mu_f, duals, beta, config.eps_beta) <= config.kkt_tol
        log.debug("iteration %d: |dy|=%.3e fixed=%s", it, step, fixed)
        if done:
            status = CONVERGED
            break
        enforced, enforced_resp, eta_prev, y_prev, warm = beta, ctrl.response, duals, y, nominal

    nominal, duals, ctrl, beta, hct, enf, enf_resp, last = prev
    return SlsSolution(nominal=nominal, gains=ctrl.gains, response=ctrl.response, tightening=beta,
                       duals=duals, iterations=last, timings=timings, status=status, x0=x0,
                       hct=hct, enforced=enf, y_history=y_hist, history=hist,
                       riccati_steps=steps_hist, init=mode, failed_iteration=failed,
                       enforced_response=enf_resp)


@dataclass
class ClosedLoopStep:
    t: int
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    status: str
    iterations: int
    solve_time: float
    margin: float
    tightening_margin: float


@dataclass
class ClosedLoopTrace:
    steps: list
    x_final: np.ndarray | None
    status: str = "ok"
    failed_step: int | None = None

    @property
    def violations(self) -> int:
        return sum(1 for s in self.steps if s.margin < 0)


def _margins(ocp: RobustOcp, x, u):
    c = ocp.constraints
    return float(-(c.G[0] @ np.concatenate([x, u]) + c.b[0]).max())


def solve_receding_horizon(ocp: RobustOcp, x0, steps: int, disturbance, config: SolverConfig | None = None,
                           rng: np.random.Generator | None = None) -> ClosedLoopTrace:
    """Closed loop under repeated re-solves from the measured state.

    ``disturbance`` is an array (steps, nw) or a callable ``(t, rng, x) -> w``
    with ``||w||_2 <= 1`` (``x`` is the measured state); it is scaled by ``E[0]`` inside the plant.  The first
    nominal input is applied and the shifted nominal warm-starts the next QP.
    ``margin`` is the smallest slack of the original stage constraints at the
    applied ``(x, u)``; ``tightening_margin`` the smallest slack of the
    nominal first stage against the tightened constraints of the next stage.
    """
    config = config or SolverConfig()
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x0, dtype=float).ravel()
    trace = []
    warm = None
    sysm = ocp.system
    for t in range(steps):
        w_t = disturbance(t, rng, x) if callable(disturbance) else np.asarray(disturbance[t], dtype=float)
        tic = time.perf_counter()
        try:
            sol = solve(ocp, x, config, warm_start=warm)
        except (Infeasible, MaxIterations) as exc:
            log.info("closed loop stopped at step %d: %s", t, exc)
            return ClosedLoopTrace(trace, x, INFEASIBLE if isinstance(exc, Infeasible) else MAX_ITER, t)
        elapsed = time.perf_counter() - tic
        u = sol.nominal.v[0].copy()
        hct1 = sol.hct.stage[1] if ocp.N > 1 else sol.hct.terminal
        G1 = ocp.constraints.G[1] if ocp.N > 1 else None
        if G1 is not None:
            nom = G1 @ np.concatenate([sol.nominal.z[1], sol.nominal.v[1]]) + ocp.constraints.b[1]
        else:
            nom = ocp.constraints.Gf @ sol.nominal.z[1] + ocp.constraints.bf
        tmargin = float(-(nom + hct1).max())
        trace.append(ClosedLoopStep(t, x.copy(), u, np.asarray(w_t, dtype=float), sol.status,
                                    sol.iterations, elapsed, _margins(ocp, x, u), tmargin))
        x = sysm.A[0] @ x + sysm.B[0] @ u + sysm.E[0] @ w_t
        warm = _shift(sol.nominal)
        if sol.status != CONVERGED:
            return ClosedLoopTrace(trace, x, sol.status, t)
    return ClosedLoopTrace(trace, x)


def _shift(nom: NominalSolution) -> NominalSolution:
    def sh(a):
        return np.concatenate([a[1:], a[-1:]])
    return replace(nom, z=sh(nom.z), v=sh(nom.v), lam=sh(nom.lam), mu=sh(nom.mu))


__all__ = ["SolverConfig", "SlsSolution", "IterateRecord", "update_duals", "tightening_residual",
           "solve", "solve_receding_horizon", "ClosedLoopTrace", "ClosedLoopStep", "simulate_closed_loop"]

"""Benchmark studies: wall-time scaling and iteration counts.

Both studies produce flat records that the CLI writes as CSV (column layout in
``docs/csv_schema.md``).  Scaling runs are sequential so timings are clean;
the iteration study may fan trials out over processes since it records no
timings.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import Infeasible, InsufficientHistory, InvalidParameter, MaxIterations, SamplingExhausted
from .fast_sls import CONVERGED, INFEASIBLE, MAX_ITER, SolverConfig, solve
from .model import RobustOcp, mass_spring_damper_chain
from .nominal_qp import solve_nominal
from .response import DualField, compute_beta, compute_hct, solve_controller
from .verify import estimate_convergence_rate

MAX_DRAWS = 10**6
MIN_ACCEPTANCE = 1e-3


@dataclass
class BenchRecord:
    label: str
    L: int
    N: int
    nx: int
    nu: int
    t_qp: float
    t_riccati: float
    t_total: float
    iterations: int
    status: str
    rep: int
    seed: int

    def __post_init__(self):
        if min(self.t_qp, self.t_riccati, self.t_total) < 0:
            raise InvalidParameter("times must be nonnegative")
        if self.status not in (CONVERGED, MAX_ITER, INFEASIBLE):
            raise InvalidParameter(f"unknown status {self.status!r}")


BENCH_COLUMNS = ("label", "L", "N", "nx", "nu", "t_qp", "t_riccati", "t_total", "iterations", "status",
                 "rep", "seed", "log10_N", "log10_nx", "log10_t_riccati", "log10_t_total")


def _log10(x):
    return math.log10(x) if x > 0 else float("nan")


def bench_row(r: BenchRecord) -> dict:
    """CSV row with the log-log plotting columns filled in."""
    row = {k: getattr(r, k) for k in BENCH_COLUMNS[:12]}
    row.update(log10_N=_log10(r.N), log10_nx=_log10(r.nx),
               log10_t_riccati=_log10(r.t_riccati), log10_t_total=_log10(r.t_total))
    return row


def fit_loglog_slope(x, t) -> float | None:
    """Least-squares slope of log t against log x over the distinct ``x`` values.

    Repetitions at one grid point are collapsed to their median first, so a
    single slow outlier does not tilt the fit.  Returns None when fewer than
    two distinct grid points remain (the slope is not defined).
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    ok = (x > 0) & (t > 0) & np.isfinite(t)
    x, t = x[ok], t[ok]
    pts = np.unique(x)
    if pts.size < 2:
        return None
    med = np.array([np.median(t[x == p]) for p in pts])
    return float(np.polyfit(np.log(pts), np.log(med), 1)[0])


# ---------------------------------------------------------------------------
# random feasible initial states
# ---------------------------------------------------------------------------


class FeasibleSampler:
    """Uniform draws from the state box, kept when the first QP is feasible.

    "First QP" means the nominal QP under the tightening of the eta = 0
    controller, which is the first problem :func:`fastsls.fast_sls.solve`
    poses with its default start.  A draw first has to satisfy the stage-0
    rows that do not involve the input; only survivors pay for the QP probe.
    """

    def __init__(self, ocp: RobustOcp, box: float | None = None, config: SolverConfig | None = None,
                 max_draws: int = MAX_DRAWS, min_acceptance: float = MIN_ACCEPTANCE):
        if box is None:
            box = ocp.meta.get("bound")
        if box is None or not box > 0:
            raise InvalidParameter("a positive state box is required (problem meta has no 'bound')")
        self.ocp = ocp
        self.box = float(box)
        self.config = config or SolverConfig()
        self.max_draws = int(max_draws)
        self.min_acceptance = float(min_acceptance)
        self.draws = 0
        self.accepted = 0
        c = ocp.constraints
        u_free = np.all(c.G[0][:, ocp.nx:] == 0, axis=1)
        self._Gx0, self._b0 = c.G[0][u_free, :ocp.nx], c.b[0][u_free]
        ctrl = solve_controller(ocp.system, c, ocp.weights, DualField.zeros(ocp.N, ocp.nc, ocp.nf))
        beta = compute_beta(ctrl.response, c, self.config.eps_beta)
        self._hct = compute_hct(beta, self.config.eps_beta)

    def feasible(self, x0) -> bool:
        if np.any(self._Gx0 @ x0 + self._b0 > 0):
            return False
        try:
            solve_nominal(self.ocp, x0, self._hct, replace(self.config.qp, warm_start=None))
        except (Infeasible, MaxIterations):
            return False
        return True

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        while True:
            if self.draws >= self.max_draws and self.accepted < self.min_acceptance * self.draws:
                raise SamplingExhausted(
                    f"feasible initial states accepted {self.accepted} of {self.draws} draws, "
                    f"below the {self.min_acceptance:.1%} floor")
            x0 = rng.uniform(-self.box, self.box, self.ocp.nx)
            self.draws += 1
            if self.feasible(x0):
                self.accepted += 1
                return x0


# ---------------------------------------------------------------------------
# iteration-count study
# ---------------------------------------------------------------------------


@dataclass
class IterationRecord:
    trial: int
    x0: np.ndarray
    iterations: int
    status: str
    max_ratio: float | None


def _rate(sol) -> float | None:
    try:
        ratios = estimate_convergence_rate(sol.y_history)
    except InsufficientHistory:
        return None
    return float(np.max(ratios[1:])) if ratios.size > 1 else None


def _iteration_trial(args) -> IterationRecord:
    ocp, trial, x0, config = args
    try:
        sol = solve(ocp, x0, config)
    except Infeasible:
        return IterationRecord(trial, x0, 0, INFEASIBLE, None)
    except MaxIterations:
        return IterationRecord(trial, x0, 0, MAX_ITER, None)
    return IterationRecord(trial, x0, sol.iterations, sol.status, _rate(sol))


def iteration_study(ocp: RobustOcp, n: int, seed: int = 0, config: SolverConfig | None = None,
                    box: float | None = None, parallel_trials: int = 1,
                    sampler: FeasibleSampler | None = None) -> list[IterationRecord]:
    """Iteration counts of :func:`solve` over ``n`` random feasible initial states.

    All initial states are drawn up front from ``default_rng(seed)``, so the
    records do not depend on ``parallel_trials``.
    """
    if n < 1:
        raise InvalidParameter(f"trial count must be at least 1, got {n}")
    config = config or SolverConfig()
    sampler = sampler or FeasibleSampler(ocp, box, config)
    rng = np.random.default_rng(seed)
    jobs = [(ocp, t, sampler.draw(rng), config) for t in range(n)]
    if parallel_trials > 1:
        with ProcessPoolExecutor(parallel_trials) as ex:
            return list(ex.map(_iteration_trial, jobs))
    return [_iteration_trial(j) for j in jobs]


def iteration_columns(nx: int) -> list[str]:
    return ["trial", *[f"x0_{i}" for i in range(nx)], "iterations", "status", "max_ratio"]


def iteration_row(r: IterationRecord) -> dict:
    row = {"trial": r.trial, **{f"x0_{i}": v for i, v in enumerate(r.x0)},
           "iterations": r.iterations, "status": r.status, "max_ratio": r.max_ratio}
    return row


# ---------------------------------------------------------------------------
# scaling study
# ---------------------------------------------------------------------------


def _timed_solve(ocp, x0, config, label, L, rep, seed) -> BenchRecord:
    tic = time.perf_counter_ns()
    try:
        sol = solve(ocp, x0, config)
        status, iters, tm = sol.status, sol.iterations, sol.timings
    except (Infeasible, MaxIterations) as exc:
        status = INFEASIBLE if isinstance(exc, Infeasible) else MAX_ITER
        iters, tm = 0, {}
    total = time.perf_counter_ns() - tic
    return BenchRecord(label, L, ocp.N, ocp.nx, ocp.nu, tm.get("qp", 0) * 1e-9, tm.get("riccati", 0) * 1e-9,
                       total * 1e-9, iters, status, rep, seed)


def scaling_study(mode: str, grid, fixed: int, reps: int = 5, seed: int = 0, dt: float = 0.1,
                  config: SolverConfig | None = None, x0_scale: float = 0.0) -> list[BenchRecord]:
    """Wall times of benchmark solves over a grid of horizons or chain lengths.

    ``mode="horizon"`` varies N at ``fixed`` masses; ``mode="states"`` varies
    the number of masses at horizon ``fixed``.  The initial state is
    ``x0_scale`` times a vector drawn from ``default_rng(seed)`` uniform on
    [-1, 1]; the default of zero keeps the iteration count at one across
    the grid so that times compare like with like.
    """
    if mode not in ("horizon", "states"):
        raise InvalidParameter(f"unknown bench mode {mode!r}")
    grid = [int(g) for g in grid]
    if not grid or min(grid) < 1 or fixed < 1:
        raise InvalidParameter("grid values must be at least 1")
    if reps < 1:
        raise InvalidParameter("repetitions must be at least 1")
    config = config or SolverConfig()
    records = []
    warmed = False
    for g in grid:
        L, N = (fixed, g) if mode == "horizon" else (g, fixed)
        ocp = mass_spring_damper_chain(L, N, dt)
        x0 = x0_scale * np.random.default_rng(seed).uniform(-1, 1, ocp.nx)
        if not warmed:
            # the first call compiles the kernels; keep it out of the records
            _timed_solve(ocp, x0, config, "", L, 0, seed)
            warmed = True
        for rep in range(reps):
            records.append(_timed_solve(ocp, x0, config, f"msd-L{L}-N{N}", L, rep, seed))
    return records


def scaling_slope(records: list[BenchRecord], mode: str) -> float | None:
    """Riccati-phase slope against N (horizon) or total-time slope against n_x (states).

    Runs that did not converge are excluded.
    """
    ok = [r for r in records if r.status == CONVERGED]
    if mode == "horizon":
        return fit_loglog_slope([r.N for r in ok], [r.t_riccati for r in ok])
    return fit_loglog_slope([r.nx for r in ok], [r.t_total for r in ok])


__all__ = ["BenchRecord", "BENCH_COLUMNS", "bench_row", "fit_loglog_slope", "FeasibleSampler",
           "IterationRecord", "iteration_study", "iteration_columns", "iteration_row",
           "scaling_study", "scaling_slope"]

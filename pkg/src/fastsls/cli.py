"""Command-line entry point ``fast-sls``.

Exit codes: 0 success, 2 usage or bad input, 3 refused overwrite,
4 infeasible, 5 iteration limit, 6 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import bench, scp
from .errors import (
    FastSlsError,
    Infeasible,
    InnerInfeasible,
    InvalidParameter,
    MaxIterations,
    MaxOuterIterations,
    SamplingExhausted,
)
from .fast_sls import CONVERGED, INFEASIBLE, MAX_ITER, SolverConfig, solve, solve_receding_horizon
from .io import (
    FormatError,
    dumps,
    load_problem,
    read_json,
    report_to_dict,
    save_problem,
    solution_from_dict,
    solution_to_dict,
    write_json,
)
from .model import mass_spring_damper_chain, validate
from .nominal_qp import QpSettings
from .verify import verify_solution

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4
EXIT_MAX_ITER = 5
EXIT_VERIFY = 6

log = logging.getLogger("fastsls")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FASTSLS_THREADS", "1")))
    except ValueError:
        return 1


def solver_config(args) -> SolverConfig:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = {}
    if getattr(args, "config", None):
        cfg = read_json(args.config)
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
    known = {f.name for f in fields(SolverConfig)}
    unknown = set(cfg) - known
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    qp = cfg.pop("qp", {}) or {}
    qp_known = {f.name for f in fields(QpSettings)} - {"warm_start"}
    if set(qp) - qp_known:
        raise UsageError(f"unknown qp config keys: {', '.join(sorted(set(qp) - qp_known))}")
    for flag, key in (("eps_m", "eps_m"), ("eps_beta", "eps_beta"), ("max_iterations", "max_iterations"),
                      ("init", "init"), ("stopping", "stopping")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    n = _threads()
    if n > 1:
        cfg.setdefault("parallel", True)
        cfg.setdefault("workers", n)
    return SolverConfig(qp=QpSettings(**qp), **cfg)


def parse_vector(spec: str, n: int, name: str) -> np.ndarray:
    try:
        vals = np.array([float(s) for s in spec.replace(" ", "").split(",") if s != ""])
    except ValueError:
        raise UsageError(f"{name} must be a comma-separated list of numbers, got {spec!r}") from None
    if vals.size != n:
        raise UsageError(f"{name} needs {n} entries, got {vals.size}")
    return vals


def initial_state(spec: str, ocp, seed: int, config: SolverConfig) -> np.ndarray:
    """``zero``, ``random`` (a feasible draw under ``seed``) or explicit values."""
    if spec == "zero":
        return np.zeros(ocp.nx)
    if spec == "random":
        sampler = bench.FeasibleSampler(ocp, config=config)
        return sampler.draw(np.random.default_rng(seed))
    return parse_vector(spec, ocp.nx, "x0")


def _fmt(v, digits=None):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not np.isfinite(v):
            return "nan" if np.isnan(v) else ("inf" if v > 0 else "-inf")
        return f"{v:.{digits}f}" if digits is not None else repr(v)
    return str(v)


TIME_COLUMNS = {"t_qp", "t_riccati", "t_total", "solve_time"}


def write_csv(path, columns, rows, force: bool = False) -> None:
    """CSV with times at 9 fractional digits and other floats round-trip exact."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c), 9 if c in TIME_COLUMNS else None) for c in columns])
    if path in (None, "-"):
        sys.stdout.write(buf.getvalue())
        return
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")
    path.write_text(buf.getvalue())


def _phase_seconds(timings: dict) -> str:
    return " ".join(f"{k}={v * 1e-9:.6f}s" for k, v in timings.items())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    ocp = mass_spring_damper_chain(args.masses, args.horizon, args.dt)
    save_problem(ocp, args.output, args.force)
    print(f"wrote {args.output}: L={args.masses} N={ocp.N} nx={ocp.nx} nu={ocp.nu}")
    return EXIT_OK


def cmd_solve(args) -> int:
    ocp = load_problem(args.problem)
    validate(ocp)
    config = solver_config(args)
    x0 = initial_state(args.x0, ocp, args.seed, config)
    if args.output and Path(args.output).exists() and not args.force:
        raise FileExistsError(f"{args.output} exists (use --force to overwrite)")
    sol = solve(ocp, x0, config)
    if args.output:
        write_json(solution_to_dict(sol, timings=args.timings), args.output, args.force)
    print(f"status={sol.status} iterations={sol.iterations} objective={sol.nominal.objective:.10g} "
          f"{_phase_seconds(sol.timings)}")
    return {CONVERGED: EXIT_OK, INFEASIBLE: EXIT_INFEASIBLE, MAX_ITER: EXIT_MAX_ITER}[sol.status]


def cmd_verify(args) -> int:
    ocp = load_problem(args.problem)
    validate(ocp)
    sol = solution_from_dict(read_json(args.solution), ocp)
    rep = verify_solution(ocp, sol.x0, sol, n_samples=args.samples, seed=args.seed, tol=args.tol,
                          workers=_threads())
    text = dumps(report_to_dict(rep))
    if args.output:
        write_json(report_to_dict(rep), args.output, args.force)
    else:
        sys.stdout.write(text)
    for name, ok in sorted(rep.checks.items()):
        print(f"{name}: {'skipped' if ok == 'skipped' else ('pass' if ok else 'FAIL')}", file=sys.stderr)
    return EXIT_OK if rep.passed else EXIT_VERIFY


def _grid(spec: str) -> list[int]:
    try:
        g = [int(s) for s in spec.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"grid must be comma-separated integers, got {spec!r}") from None
    if not g or min(g) < 1:
        raise UsageError("grid values must be at least 1")
    return g


def cmd_bench(args) -> int:
    grid = _grid(args.grid)
    fixed = args.masses if args.mode == "horizon" else args.horizon
    config = replace(solver_config(args), parallel=False)
    if args.output and args.output != "-" and Path(args.output).exists() and not args.force:
        raise FileExistsError(f"{args.output} exists (use --force to overwrite)")
    recs = bench.scaling_study(args.mode, grid, fixed, args.reps, args.seed, args.dt, config)
    write_csv(args.output, bench.BENCH_COLUMNS, [bench.bench_row(r) for r in recs], True)
    slope = bench.scaling_slope(recs, args.mode)
    what = "riccati time vs N" if args.mode == "horizon" else "total time vs nx"
    print(f"slope ({what}): {'not-applicable' if slope is None else f'{slope:.3f}'}", file=sys.stderr)
    failed = sum(r.status != CONVERGED for r in recs)
    if failed:
        print(f"{failed} runs did not converge and were left out of the fit", file=sys.stderr)
    return EXIT_OK


def cmd_iterations(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    ocp = mass_spring_damper_chain(args.masses, args.horizon, args.dt)
    config = solver_config(args)
    if args.output and args.output != "-" and Path(args.output).exists() and not args.force:
        raise FileExistsError(f"{args.output} exists (use --force to overwrite)")
    recs = bench.iteration_study(ocp, args.trials, args.seed, config, parallel_trials=args.parallel_trials)
    write_csv(args.output, bench.iteration_columns(ocp.nx), [bench.iteration_row(r) for r in recs], True)
    its = np.array([r.iterations for r in recs if r.status == CONVERGED])
    counts = {s: sum(r.status == s for r in recs) for s in (CONVERGED, MAX_ITER, INFEASIBLE)}
    print(" ".join(f"{k}={v}" for k, v in counts.items()), file=sys.stderr)
    if its.size:
        hist = np.bincount(its)
        print(f"median iterations {np.median(its):g}; histogram "
              + " ".join(f"{i}:{c}" for i, c in enumerate(hist) if c), file=sys.stderr)
    return EXIT_OK


def _disturbance(mode: str, nw: int, E0):
    if mode == "zero":
        return lambda t, rng, x: np.zeros(nw)
    if mode == "sphere":
        def sphere(t, rng, x):
            w = rng.standard_normal(nw)
            return w / np.linalg.norm(w)
        return sphere
    if mode == "adversarial-axis":
        # unit push along the disturbance axis that moves the largest state
        # component further towards its bound
        def axis(t, rng, x):
            i = int(np.argmax(np.abs(x)))
            a = int(np.argmax(np.abs(E0[i])))
            w = np.zeros(nw)
            w[a] = 1.0 if (x[i] >= 0) == (E0[i, a] >= 0) else -1.0
            return w
        return axis
    raise UsageError(f"unknown disturbance mode {mode!r}")


def closed_loop_columns(nx, nu, nw):
    return (["t", *[f"x_{i}" for i in range(nx)], *[f"u_{i}" for i in range(nu)],
             *[f"w_{i}" for i in range(nw)], "margin", "tightening_margin", "violation",
             "status", "iterations", "solve_time"])


def cmd_closed_loop(args) -> int:
    ocp = load_problem(args.problem)
    validate(ocp)
    if args.steps < 0:
        raise UsageError("--steps must be nonnegative")
    config = solver_config(args)
    x0 = initial_state(args.x0, ocp, args.seed, config)
    if args.output and args.output != "-" and Path(args.output).exists() and not args.force:
        raise FileExistsError(f"{args.output} exists (use --force to overwrite)")
    dist = _disturbance(args.disturbance, ocp.nw, ocp.system.E[0])
    trace = solve_receding_horizon(ocp, x0, args.steps, dist, config, np.random.default_rng(args.seed))
    rows = []
    for s in trace.steps:
        row = {"t": s.t, "margin": s.margin, "tightening_margin": s.tightening_margin,
               "violation": int(s.margin < 0), "status": s.status, "iterations": s.iterations,
               "solve_time": s.solve_time if args.timings else None}
        row.update({f"x_{i}": v for i, v in enumerate(s.x)})
        row.update({f"u_{i}": v for i, v in enumerate(s.u)})
        row.update({f"w_{i}": v for i, v in enumerate(s.w)})
        rows.append(row)
    write_csv(args.output, closed_loop_columns(ocp.nx, ocp.nu, ocp.nw), rows, True)
    print(f"steps={len(trace.steps)} violations={trace.violations} status={trace.status}", file=sys.stderr)
    if trace.status == INFEASIBLE:
        return EXIT_INFEASIBLE
    if trace.status == MAX_ITER:
        return EXIT_MAX_ITER
    return EXIT_OK


def cmd_scp_demo(args) -> int:
    model, x0 = scp.MODELS[args.model](args.horizon)
    config = solver_config(args)
    try:
        state = scp.scp_solve(model, x0, config, tol=args.tol, max_outer=args.max_outer)
        code = EXIT_OK
    except MaxOuterIterations as exc:
        state, code = exc.state, EXIT_MAX_ITER
    for i, s in enumerate(state.steps, 1):
        print(f"outer {i}: |dy|_inf = {s:.3e}")
    print(f"model={args.model} converged={state.converged} outer_iterations={state.iterations}")
    if args.output:
        doc = {"model": args.model, "x0": x0, "z": state.z, "v": state.v, "tau": state.tau,
               "steps": state.steps, "converged": state.converged, "iterations": state.iterations}
        write_json(doc, args.output, args.force)
    return code


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--config", help="JSON file with SolverConfig fields (flags override it)")
    g.add_argument("--eps-m", dest="eps_m", type=float, help="primal stopping tolerance (default 1e-8)")
    g.add_argument("--eps-beta", dest="eps_beta", type=float, help="tightening floor (default 1e-10)")
    g.add_argument("--max-iterations", dest="max_iterations", type=int, help="outer iteration limit (default 50)")
    g.add_argument("--init", choices=("lqr", "eps"), help="first tightening (default lqr)")
    g.add_argument("--stopping", choices=("primal", "kkt"), help="stopping rule (default primal)")


def _out_flags(p, required=False, help="output path"):
    p.add_argument("--output", required=required, help=help)
    p.add_argument("--force", action="store_true", help="overwrite an existing output file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fast-sls", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a mass-spring-damper chain problem")
    p.add_argument("--masses", type=int, required=True)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--dt", type=float, default=0.1)
    _out_flags(p, help="problem JSON path (default problem.json)")
    p.set_defaults(func=cmd_generate, output="problem.json")

    p = sub.add_parser("solve", help="solve a problem from one initial state")
    p.add_argument("problem")
    p.add_argument("--x0", default="zero", help="'zero', 'random' or comma-separated values")
    p.add_argument("--seed", type=int, default=0, help="seed for --x0 random")
    p.add_argument("--timings", action="store_true", help="store phase timings in the solution file")
    _out_flags(p, help="solution JSON path")
    _solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("verify", help="check a solution against its problem")
    p.add_argument("problem")
    p.add_argument("solution")
    p.add_argument("--samples", type=int, default=10_000, help="Monte-Carlo samples (0 skips)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    _out_flags(p, help="report JSON path (default stdout)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="wall-time scaling study")
    p.add_argument("--mode", choices=("horizon", "states"), required=True)
    p.add_argument("--grid", required=True, help="comma-separated horizons (horizon) or mass counts (states)")
    p.add_argument("--masses", type=int, default=2, help="fixed mass count in horizon mode")
    p.add_argument("--horizon", type=int, default=10, help="fixed horizon in states mode")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    _out_flags(p, help="CSV path (default stdout)")
    _solver_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("iterations", help="iteration counts over random feasible initial states")
    p.add_argument("--masses", type=int, default=2)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallel-trials", dest="parallel_trials", type=int, default=1,
                   help="worker processes for the trials")
    _out_flags(p, help="CSV path (default stdout)")
    _solver_flags(p)
    p.set_defaults(func=cmd_iterations)

    p = sub.add_parser("closed-loop", help="receding-horizon simulation")
    p.add_argument("problem")
    p.add_argument("--x0", default="zero", help="'zero', 'random' or comma-separated values")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--disturbance", choices=("zero", "sphere", "adversarial-axis"), default="sphere")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timings", action="store_true", help="fill the solve_time column")
    _out_flags(p, help="CSV path (default stdout)")
    _solver_flags(p)
    p.set_defaults(func=cmd_closed_loop)

    p = sub.add_parser("scp-demo", help="run a built-in nonlinear model through SCP")
    p.add_argument("--model", choices=sorted(scp.MODELS), default="sine")
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-outer", dest="max_outer", type=int, default=20)
    _out_flags(p, help="result JSON path")
    _solver_flags(p)
    p.set_defaults(func=cmd_scp_demo)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, InvalidParameter, FormatError, FileNotFoundError, IsADirectoryError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Infeasible, InnerInfeasible) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (MaxIterations, MaxOuterIterations) as exc:
        print(f"iteration limit: {exc}", file=sys.stderr)
        return EXIT_MAX_ITER
    except SamplingExhausted as exc:
        print(f"sampling: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FastSlsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

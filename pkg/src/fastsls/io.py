"""JSON documents for problems, solutions and verification reports.

Formats are versioned by their ``format`` field and checked against the
schema files shipped in ``fastsls/schemas``.  Non-finite floats are written
as ``null``.
"""
from __future__ import annotations

import json
import math
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .fast_sls import SlsSolution
from .model import ConstraintSet, CostWeights, LtvSystem, RobustOcp
from .nominal_qp import NominalSolution
from .response import DualField, GainSchedule, SystemResponse, Tightening

PROBLEM_FORMAT = "fast-sls-problem/1"
SOLUTION_FORMAT = "fast-sls-solution/1"
REPORT_FORMAT = "fast-sls-report/1"
_SCHEMA_FILES = {PROBLEM_FORMAT: "problem.schema.json", SOLUTION_FORMAT: "solution.schema.json",
                 REPORT_FORMAT: "report.schema.json"}


class FormatError(ValueError):
    """Document does not match its schema."""


@lru_cache(maxsize=None)
def schema(fmt: str) -> dict:
    text = resources.files("fastsls").joinpath("schemas", _SCHEMA_FILES[fmt]).read_text()
    return json.loads(text)


def validate_document(doc: dict, fmt: str) -> None:
    try:
        jsonschema.validate(doc, schema(fmt))
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise FormatError(f"{fmt}: {exc.message} at {path}") from None


def _clean(obj):
    """Nested lists of Python floats with non-finite values as None."""
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_clean(o) for o in obj]
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _array(nested):
    """Inverse of :func:`_clean` for rectangular nested lists."""
    a = np.array(nested, dtype=object)
    if a.size == 0:
        return np.array(nested, dtype=float)
    a[a == None] = np.nan  # noqa: E711
    return a.astype(float)


def dumps(doc: dict) -> str:
    return json.dumps(_clean(doc), indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(doc: dict, path, force: bool = False) -> None:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")
    path.write_text(dumps(doc))


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# problem
# ---------------------------------------------------------------------------


def problem_to_dict(ocp: RobustOcp) -> dict:
    s, c, w = ocp.system, ocp.constraints, ocp.weights
    doc = {"format": PROBLEM_FORMAT, "N": ocp.N, "nx": ocp.nx, "nu": ocp.nu, "nw": ocp.nw,
           "nc": ocp.nc, "nf": ocp.nf, "A": s.A, "B": s.B, "E": s.E, "G": c.G, "b": c.b,
           "Gf": c.Gf, "bf": c.bf,
           "weights": {k: getattr(w, k) for k in ("Q", "R", "P", "Q_reg", "R_reg", "P_reg")},
           "meta": dict(ocp.meta)}
    if c.G_cone is not None:
        doc["G_cone"] = c.G_cone
    if c.Gf_cone is not None:
        doc["Gf_cone"] = c.Gf_cone
    return _clean(doc)


def problem_from_dict(doc: dict) -> RobustOcp:
    validate_document(doc, PROBLEM_FORMAT)
    N, nx, nc, nf = doc["N"], doc["nx"], doc["nc"], doc["nf"]
    Gf = np.array(doc["Gf"], dtype=float).reshape(nf, nx)
    G = np.array(doc["G"], dtype=float).reshape(N, nc, -1)
    b = np.array(doc["b"], dtype=float).reshape(N, nc)
    cons = ConstraintSet(G, b, Gf, np.array(doc["bf"], dtype=float),
                         G_cone=None if "G_cone" not in doc else np.array(doc["G_cone"], dtype=float),
                         Gf_cone=None if "Gf_cone" not in doc else np.array(doc["Gf_cone"], dtype=float))
    w = CostWeights(**{k: np.array(v, dtype=float) for k, v in doc["weights"].items()})
    sysm = LtvSystem(np.array(doc["A"], dtype=float), np.array(doc["B"], dtype=float),
                     np.array(doc["E"], dtype=float))
    return RobustOcp(sysm, cons, w, dict(doc.get("meta", {})))


def save_problem(ocp: RobustOcp, path, force: bool = False) -> None:
    write_json(problem_to_dict(ocp), path, force)


def load_problem(path) -> RobustOcp:
    return problem_from_dict(read_json(path))


# ---------------------------------------------------------------------------
# solution
# ---------------------------------------------------------------------------


def _pack(arr, start: int):
    """Blocks ``arr[j, k]`` for ``k >= j + start`` as a ragged list over ``j``."""
    return [arr[j, j + start:] for j in range(arr.shape[0])]


def _unpack(blocks, shape, start: int):
    out = np.zeros(shape)
    for j, b in enumerate(blocks):
        b = _array(b)
        if b.size:
            out[j, j + start:j + start + b.shape[0]] = b
    return out


def _response_dict(r: SystemResponse) -> dict:
    return {"phi_x": _pack(r.phi_x, 1), "phi_u": _pack(r.phi_u, 1)}


def _tightening_dict(t: Tightening) -> dict:
    return {"beta": _pack(t.beta, 1), "beta_f": t.beta_f, "eps_beta": t.eps_beta}


def solution_to_dict(sol: SlsSolution, timings: bool = False) -> dict:
    """Solution document; phase timings are included only when ``timings``.

    Timings are the one non-deterministic output of a solve, so leaving them
    out keeps documents byte-identical across runs.
    """
    n = sol.nominal
    enf_resp = sol.enforced_response
    doc = {
        "format": SOLUTION_FORMAT, "status": sol.status, "iterations": sol.iterations,
        "failed_iteration": sol.failed_iteration, "init": sol.init, "x0": sol.x0,
        "nominal": {"z": n.z, "v": n.v, "lam": n.lam, "mu": n.mu, "mu_f": n.mu_f, "objective": n.objective},
        "response": _response_dict(sol.response),
        "enforced_response": None if enf_resp is None else _response_dict(enf_resp),
        "gains": {"K": _pack(sol.gains.K, 1)},
        "tightening": _tightening_dict(sol.tightening),
        "enforced": None if sol.enforced is None else _tightening_dict(sol.enforced),
        "duals": {"eta": _pack(sol.duals.eta, 1), "eta_f": sol.duals.eta_f},
        "telemetry": {"steps": [np.abs(sol.y_history[i + 1] - sol.y_history[i]).max()
                                for i in range(len(sol.y_history) - 1)],
                      "riccati_steps": list(sol.riccati_steps)},
    }
    if timings:
        doc["telemetry"]["timings_ns"] = {k: int(v) for k, v in sol.timings.items()}
    return _clean(doc)


def _response_from(doc, N, nx, nu, nw):
    return SystemResponse(_unpack(doc["phi_x"], (N, N + 1, nx, nw), 1),
                          _unpack(doc["phi_u"], (N, N, nu, nw), 1))


def _tightening_from(doc, N, nc):
    return Tightening(_unpack(doc["beta"], (N, N, nc), 1), _array(doc["beta_f"]), float(doc["eps_beta"]))


def solution_from_dict(doc: dict, ocp: RobustOcp) -> SlsSolution:
    """Rebuild a solution for ``ocp``; history and timings are not restored."""
    validate_document(doc, SOLUTION_FORMAT)
    try:
        return _solution_from_dict(doc, ocp)
    except ValueError as exc:
        raise FormatError(f"{SOLUTION_FORMAT}: arrays do not match the problem dimensions ({exc})") from None


def _solution_from_dict(doc: dict, ocp: RobustOcp) -> SlsSolution:
    N, nx, nu, nw, nc, nf = ocp.N, ocp.nx, ocp.nu, ocp.nw, ocp.nc, ocp.nf
    nd = doc["nominal"]
    nominal = NominalSolution(z=_array(nd["z"]).reshape(N + 1, nx), v=_array(nd["v"]).reshape(N, nu),
                              lam=_array(nd["lam"]).reshape(N, nx), mu=_array(nd["mu"]).reshape(N, nc),
                              mu_f=_array(nd["mu_f"]).reshape(nf), objective=float(nd["objective"]))
    er = doc.get("enforced_response")
    en = doc.get("enforced")
    return SlsSolution(
        nominal=nominal,
        gains=GainSchedule(_unpack(doc["gains"]["K"], (N, N, nu, nx), 1)),
        response=_response_from(doc["response"], N, nx, nu, nw),
        tightening=_tightening_from(doc["tightening"], N, nc),
        duals=DualField(_unpack(doc["duals"]["eta"], (N, N, nc), 1), _array(doc["duals"]["eta_f"]).reshape(N, nf)),
        iterations=int(doc["iterations"]), timings=dict(doc.get("telemetry", {}).get("timings_ns", {})),
        status=doc["status"], x0=_array(doc["x0"]),
        enforced=None if en is None else _tightening_from(en, N, nc),
        enforced_response=None if er is None else _response_from(er, N, nx, nu, nw),
        init=doc.get("init", "lqr"), failed_iteration=doc.get("failed_iteration"),
    )


def report_to_dict(report) -> dict:
    doc = {"format": REPORT_FORMAT, **report.to_dict()}
    return _clean(doc)

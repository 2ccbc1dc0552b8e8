import csv
import json

import pytest

from fastsls.cli import main

from conftest import L1_ACTIVE_X0


def _x0(x):
    return ",".join(repr(float(v)) for v in x)


@pytest.fixture
def problem(tmp_path):
    p = tmp_path / "p.json"
    assert main(["generate", "--masses", "1", "--horizon", "5", "--output", str(p)]) == 0
    return p


@pytest.fixture
def solved(tmp_path, problem):
    s = tmp_path / "s.json"
    assert main(["solve", str(problem), "--x0=" + _x0(L1_ACTIVE_X0), "--output", str(s)]) == 0
    return problem, s


def test_generate_rejects_bad_masses(tmp_path):
    assert main(["generate", "--masses", "0", "--output", str(tmp_path / "p.json")]) == 2


def test_generate_refuses_overwrite(problem):
    assert main(["generate", "--masses", "1", "--output", str(problem)]) == 3
    assert main(["generate", "--masses", "1", "--output", str(problem), "--force"]) == 0


def test_argparse_errors_exit_two():
    with pytest.raises(SystemExit) as exc:
        main(["solve"])
    assert exc.value.code == 2


def test_solve_exit_codes(tmp_path, problem, capsys):
    assert main(["solve", str(problem)]) == 0
    assert "status=converged iterations=1" in capsys.readouterr().out
    assert main(["solve", str(problem), "--x0", "10,0"]) == 4
    assert main(["solve", str(problem), "--x0=" + _x0(L1_ACTIVE_X0), "--max-iterations", "2"]) == 5
    assert main(["solve", str(problem), "--x0", "1,2,3"]) == 2
    assert main(["solve", str(tmp_path / "missing.json")]) == 2


def test_solve_output_is_byte_identical(tmp_path, solved):
    problem, s = solved
    s2 = tmp_path / "s2.json"
    assert main(["solve", str(problem), "--x0=" + _x0(L1_ACTIVE_X0), "--output", str(s2)]) == 0
    assert s.read_bytes() == s2.read_bytes()


def test_config_file_and_flag_precedence(tmp_path, problem):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"max_iterations": 2}))
    x0 = _x0(L1_ACTIVE_X0)
    assert main(["solve", str(problem), "--x0=" + x0, "--config", str(cfg)]) == 5
    assert main(["solve", str(problem), "--x0=" + x0, "--config", str(cfg), "--max-iterations", "50"]) == 0
    cfg.write_text(json.dumps({"no_such_field": 1}))
    assert main(["solve", str(problem), "--config", str(cfg)]) == 2


def test_verify_pass_and_skip(solved, capsys):
    problem, s = solved
    assert main(["verify", str(problem), str(s), "--samples", "2000"]) == 0
    out = capsys.readouterr()
    assert json.loads(out.out)["passed"] is True
    assert main(["verify", str(problem), str(s), "--samples", "0"]) == 0
    assert json.loads(capsys.readouterr().out)["checks"]["robustness"] == "skipped"


def test_verify_detects_corruption(solved, capsys):
    problem, s = solved
    doc = json.loads(s.read_text())
    blocks = doc["enforced_response"]["phi_u"]
    doc["enforced_response"]["phi_u"] = json.loads(json.dumps(blocks).replace("-", ""))
    s.write_text(json.dumps(doc))
    assert main(["verify", str(problem), str(s), "--samples", "100"]) == 6
    assert "FAIL" in capsys.readouterr().err


def test_verify_rejects_malformed(solved, tmp_path):
    problem, s = solved
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["verify", str(problem), str(bad)]) == 2
    bad.write_text(json.dumps({"format": "fast-sls-solution/1"}))
    assert main(["verify", str(problem), str(bad)]) == 2


def test_bench_single_point(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["bench", "--mode", "horizon", "--grid", "4", "--masses", "1", "--reps", "2",
                 "--output", str(out)]) == 0
    assert "not-applicable" in capsys.readouterr().err
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 2 and rows[0]["label"] == "msd-L1-N4"
    assert len(rows[0]["t_total"].split(".")[1]) == 9
    assert main(["bench", "--mode", "horizon", "--grid", "a,b"]) == 2


def test_iterations_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert main(["iterations", "--masses", "1", "--horizon", "5", "--trials", "4", "--seed", "3",
                     "--output", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["iterations", "--trials", "0"]) == 2


def test_closed_loop(tmp_path, problem):
    out = tmp_path / "cl.csv"
    assert main(["closed-loop", str(problem), "--steps", "0", "--output", str(out)]) == 0
    assert out.read_text().strip().startswith("t,x_0,x_1,u_0,w_0,w_1,margin")
    assert len(out.read_text().strip().splitlines()) == 1
    out2 = tmp_path / "cl2.csv"
    assert main(["closed-loop", str(problem), "--x0", "1,0.5", "--steps", "5",
                 "--disturbance", "adversarial-axis", "--output", str(out2)]) == 0
    rows = list(csv.DictReader(out2.open()))
    assert len(rows) == 5
    assert all(r["violation"] == "0" and r["solve_time"] == "" for r in rows)


def test_scp_demo(tmp_path, capsys):
    out = tmp_path / "scp.json"
    assert main(["scp-demo", "--model", "sine", "--output", str(out)]) == 0
    assert json.loads(out.read_text())["converged"] is True
    assert main(["scp-demo", "--model", "sine", "--max-outer", "1"]) == 5

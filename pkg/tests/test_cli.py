import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from daeident import scenarios
from daeident.cli import main
from daeident.model import augment
from daeident.ranktest import EvalPoint, check_identifiability
from daeident.sim import consistent_derivatives, simulate


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def run_json(capsys, *argv):
    code, out = run(capsys, *argv)
    return code, json.loads(out)


# --- check ------------------------------------------------------------------


def test_reactor_temperature_sensor_trajectory_point(capsys):
    code, rep = run_json(capsys, "check", "reactor", "--sensor", "x2", "--theta", "T_c", "--simulate", 5)
    assert code == 0 and rep["verdict"] == "satisfied"
    assert rep["point"]["time"] == pytest.approx(5.0)


def test_pendulum_full_parameter_set_fails(capsys):
    code, rep = run_json(capsys, "check", "pendulum", "--theta", "m", "g", "L")
    assert code == 1 and rep["verdict"] == "not-satisfied"
    assert rep["theta"] == ["m", "g", "L"]


def test_observability_without_theta(capsys):
    code, rep = run_json(capsys, "check", "reactor", "--sensor", "x1")
    assert code == 0 and rep["kind"] == "observability"


def test_fixed_orders_and_audit(capsys):
    code, rep = run_json(capsys, "check", "reactor", "--sensor", "x2", "--theta", "T_c", "--mu", 2, "--nu", 2, "--svd-audit")
    assert code == 0 and rep["mu"] == 2 and len(rep["history"]) == 1
    assert "singular_values" in json.dumps(rep)


def test_point_file(capsys, tmp_path):
    sc = scenarios.load("reactor")
    x = simulate(sc.model, t_span=(0, 3)).states[-1]
    path = tmp_path / "pt.json"
    path.write_text(json.dumps({"x": x.tolist(), "time": 3.0}))
    code, rep = run_json(capsys, "check", "reactor", "--sensor", "x3", "--theta", "T_c", "--point", path)
    assert code == 0 and rep["point"]["time"] == 3.0


def test_cli_verdict_equals_library_verdict(capsys):
    sc = scenarios.load("reactor")
    for sensor in ("x1", "x2", "x3"):
        m = sc.model_for(sensor)
        x = simulate(m, t_span=(0, 4)).states[-1]
        am = augment(m, ["T_c"])
        pt = EvalPoint(tuple([x] + consistent_derivatives(m, x, m.n + 2)), am.nominal_theta(), 4.0)
        lib = check_identifiability(am, pt)
        code, rep = run_json(capsys, "check", "reactor", "--sensor", sensor, "--theta", "T_c", "--simulate", 4)
        assert rep["verdict"] == lib.verdict and rep["rank_full"] == lib.rank_full
        assert code == (0 if lib.satisfied else 1)


def test_reports_are_identical_across_runs(capsys):
    argv = ("check", "pendulum", "--theta", "g", "--simulate", 2)
    a = run(capsys, *argv)
    b = run(capsys, *argv)
    assert a == b


# --- errors -----------------------------------------------------------------


def test_malformed_model_json(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    code, rep = run_json(capsys, "check", path)
    assert code == 2 and "error" in rep


@pytest.mark.parametrize("argv", [
    ("check", "/no/such/file.json"),
    ("check", "reactor", "--theta", "nope"),
    ("check", "reactor", "--sensor", "x9"),
    ("scan", "reactor", "--grid", ""),
    ("scan", "reactor", "--grid", "x1:0:1:0,x2:300:480:3"),
    ("linear", "reactor"),
])
def test_errors_exit_with_two(capsys, argv):
    code, rep = run_json(capsys, *argv)
    assert code == 2 and set(rep["error"]) == {"type", "message"}


def test_usage_errors_exit_with_two(capsys):
    assert main(["check"]) == 2
    assert main(["frobnicate"]) == 2
    capsys.readouterr()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "daeident", "check", "pendulum", "--theta", "m", "g", "L"],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 1
    assert json.loads(proc.stdout)["verdict"] == "not-satisfied"


# --- scan -------------------------------------------------------------------


def test_trajectory_scan_outputs(capsys, tmp_path):
    out, svg = tmp_path / "s.csv", tmp_path / "s.svg"
    code, summary = run_json(capsys, "scan", "reactor", "--sensor", "x2", "--theta", "T_c", "--points", 20,
                             "--t-min", 2, "--out", out, "--svg", svg, "--jobs", 3)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 20 == summary["points"]
    assert sum(summary["counts"].values()) == 20
    assert [int(r["index"]) for r in rows] == list(range(20))
    assert all(r["verdict"] in ("satisfied", "not-satisfied") for r in rows)
    text = svg.read_text()
    assert text.startswith("<svg") or text.startswith("<?xml")
    assert text.count("<circle") == 20 and "<polyline" in text


def test_scan_is_independent_of_job_count(capsys, tmp_path):
    paths = []
    for jobs in (1, 4):
        p = tmp_path / f"j{jobs}.csv"
        run(capsys, "scan", "linear4", "--theta", "A12,A21", "--points", 12, "--out", p, "--jobs", jobs)
        paths.append(p.read_text())
    assert paths[0] == paths[1]


def test_linear_scan_identifiable_until_decay(capsys, tmp_path):
    p = tmp_path / "l.csv"
    code, summary = run_json(capsys, "scan", "linear4", "--theta", "A12,A21", "--points", 40, "--out", p)
    rows = list(csv.DictReader(io.StringIO(p.read_text())))
    big = [r for r in rows if np.linalg.norm([float(r[f"x{i}"]) for i in range(1, 5)]) > 1e-3]
    assert big and all(r["verdict"] == "satisfied" for r in big)


def test_grid_scan(capsys, tmp_path):
    svg = tmp_path / "g.svg"
    code, summary = run_json(capsys, "scan", "reactor", "--sensor", "x2", "--theta", "T_c",
                             "--grid", "x1:0.1:0.9:3,x2:320:400:3", "--svg", svg, "--overlay")
    assert code == 0 and summary["points"] == 9
    assert summary["source"].startswith("grid:")
    assert svg.read_text().count("<circle") == 9


# --- simulate, linear, stack -------------------------------------------------


def test_simulate_csv_and_metadata(capsys, tmp_path):
    out = tmp_path / "p.csv"
    code, meta = run_json(capsys, "simulate", "pendulum", "--tspan", 0, 2, "--out", out, "--derivatives", 1)
    assert code == 0 and meta["max_consistency_residual"] <= 1e-10
    lines = out.read_text().splitlines()
    assert lines[0].split(",")[:6] == ["t", "x1", "x2", "x3", "x4", "x5"]
    assert lines[0].split(",")[6] == "x1'"
    assert json.loads(out.with_suffix(".json").read_text()) == meta


def test_simulate_stdout_is_stable(capsys):
    a = run(capsys, "simulate", "reactor", "--tspan", 0, 0.05)
    b = run(capsys, "simulate", "reactor", "--tspan", 0, 0.05)
    assert a == b and a[1].startswith("t,x1,x2,x3\n")


def test_simulate_linear_decays(capsys):
    code, text = run(capsys, "simulate", "linear4", "--store-every", 50)
    data = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1)
    norms = np.linalg.norm(data[:, 1:], axis=1)
    assert code == 0 and norms[-1] < 1e-3 * norms[0]


def test_linear_command(capsys):
    code, rep = run_json(capsys, "linear", "linear4", "--theta", "A12,A21")
    assert code == 0
    assert rep["block_observable"] is True and rep["pbh_r_observable"] is True
    assert "kalman_observable" not in rep
    assert rep["identifiability"]["verdict"] == "satisfied"
    assert rep["block_preconditions"]
    code, rep = run_json(capsys, "linear", "linear4", "--theta", "A")
    assert code == 1
    code, rep = run_json(capsys, "linear", "linear4-ode")
    assert code == 0 and rep["kalman_observable"] is True


def test_stack_command(capsys):
    code, rep = run_json(capsys, "stack", "reactor", "--theta", "T_c", "--mu", 2)
    assert code == 0 and rep["sigma"] == 3 and rep["rows_F"] == 12 and rep["rows_H"] == 3
    code, text = run(capsys, "stack", "reactor", "--mu", 1, "--dump-stack")
    assert code == 0 and "x1'" in text and text.count("F[") == 6

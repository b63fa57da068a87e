import json
import subprocess
import sys

import pytest

from srbstab import cli
from srbstab.transfer import LYReport

FAST = {
    "density": {"map": {"family": "markov_pw_linear", "params": {}}, "n_cells": 1024},
    "ly-check": {"map": {"family": "doubling", "params": {}}, "k": 2, "n_cells": 256, "n_max": 5, "n_random": 4},
    "op-distance": {"eps_list": [0.02, 0.01], "n_cells": 256},
    "flow-sim": {"n_returns": 50, "transient": 5.0},
    "quotient": {"n_grid": 256, "n_samples": 1000},
    "stability": {"family": "lorenz_theta", "eps_list": [0.02, 0.01], "n_cells": 1024, "n_op_cells": 256,
                  "birkhoff_orbits": 16, "birkhoff_steps": 1000},
    "passage-time": {"n_points": 5},
}


def run(tmp_path, experiment, cfg, name="out", extra=()):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / name
    code = cli.main([experiment, "--config", str(cfg_path), "--out", str(out), "--seed", "7", *extra])
    return code, out


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("experiment", sorted(FAST))
def test_deterministic_and_config_echo(tmp_path, experiment):
    code1, out1 = run(tmp_path, experiment, FAST[experiment], "a")
    code2, out2 = run(tmp_path, experiment, FAST[experiment], "b")
    assert code1 == code2 == cli.EXIT_OK
    t1, t2 = tree(out1), tree(out2)
    assert t1 == t2
    assert len(t1) >= 2
    echo = json.loads(t1["config.json"])
    assert echo["seed"] == 7 and echo["experiment"] == experiment
    assert set(cli.DEFAULTS[experiment]) <= set(echo)
    # the echoed config reproduces the run
    code3, out3 = run(tmp_path, experiment, echo, "c")
    assert code3 == cli.EXIT_OK and tree(out3) == t1


def test_density_markov_profile(tmp_path):
    code, out = run(tmp_path, "density", FAST["density"])
    rows = [line.split(",") for line in (out / "density.csv").read_text().splitlines()[1:]]
    vals = [float(r[2]) for r in rows]
    assert abs(vals[0] - 1.2) < 1e-6 and abs(vals[-1] - 0.8) < 1e-6
    summary = json.loads((out / "summary.json").read_text())
    assert summary["residual"] <= 1e-10


def test_ly_check_outputs(tmp_path):
    code, out = run(tmp_path, "ly-check", FAST["ly-check"])
    consts = json.loads((out / "ly_constants.json").read_text())
    assert consts["lambda_hat"] == pytest.approx(0.5)
    assert json.loads((out / "summary.json").read_text())["violations"] == 0
    header = (out / "ly_rows.csv").read_text().splitlines()[0]
    assert header == "g_index,kind,n,lhs,rhs,holds"


def test_exit_convergence(tmp_path):
    code, out = run(tmp_path, "density", {"map": {"family": "lorenz_theta", "params": {"theta": 0.75}},
                                          "n_cells": 256, "tol": 1e-30, "max_iter": 5})
    assert code == cli.EXIT_CONVERGENCE
    assert "error" in json.loads((out / "diagnostic.json").read_text())


def test_exit_violation_passage_time(tmp_path):
    code, out = run(tmp_path, "passage-time", {"n_points": 3, "tolerance": 0.0, "x1": [0.5, 0.25, 1e-3]})
    summary = json.loads((out / "summary.json").read_text())
    assert summary["max_discrepancy"] > 0 and summary["within"] is False
    assert code == cli.EXIT_VIOLATION


def test_exit_violation_ly(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "verify_ly", lambda *a, **k: LYReport([(1, 2.0, 1.0, False)], (2.0, 1.0, False)))
    code, out = run(tmp_path, "ly-check", FAST["ly-check"])
    assert code == cli.EXIT_VIOLATION
    assert json.loads((out / "summary.json").read_text())["holds"] is False


def test_exit_infeasible(tmp_path):
    code, _ = run(tmp_path, "ly-check", {"map": {"family": "lorenz_theta", "params": {"theta": 0.75}},
                                         "eps0": 1e-12, "n_cells": 256})
    assert code == cli.EXIT_INFEASIBLE
    code, _ = run(tmp_path, "density", {"map": {"family": "lorenz_theta", "params": {"theta": 0.4}}}, "bad")
    assert code == cli.EXIT_INFEASIBLE
    code, _ = run(tmp_path, "density", {"n_cels": 10}, "typo")
    assert code == cli.EXIT_INFEASIBLE


def test_flow_sim_all_fail_is_nonzero(tmp_path):
    code, out = run(tmp_path, "flow-sim", {"system": {"kind": "linear_saddle", "eigenvalues": [2, -1, -3]},
                                           "n_returns": 3})
    assert code == cli.EXIT_EMPTY
    assert json.loads((out / "summary.json").read_text())["failures"] == 3


def test_quotient_geometric_exact(tmp_path):
    code, out = run(tmp_path, "quotient", FAST["quotient"])
    doc = json.loads((out / "semiconjugacy.json").read_text())
    assert doc["max_deviation_from_lorenz_theta"] <= 1e-12
    assert doc["residual"] < 1e-9


def test_stability_zero_row(tmp_path):
    code, out = run(tmp_path, "stability", {**FAST["stability"], "eps_list": [0.0]})
    assert code == cli.EXIT_OK
    lines = (out / "report.csv").read_text().splitlines()
    assert len(lines) == 2
    assert (out / "density_gap.dat").read_text().split() == ["0", "0"]


def test_module_entry_point(tmp_path):
    out = tmp_path / "pt"
    res = subprocess.run([sys.executable, "-m", "srbstab", "passage-time", "--out", str(out)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads((out / "summary.json").read_text())["within"] is True

import json

import pytest

from gmfc.cli import main

SMALL = ["--labels", "4", "--particles", "200", "--steps", "10"]


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path / "out")])


def report(tmp_path):
    return json.loads((tmp_path / "out" / "report.json").read_text())


def test_validate_builtin(tmp_path):
    assert run(tmp_path, "validate") == 0
    assert report(tmp_path)["pass"]


def test_validate_negative_lambda(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"dims": [1, 1, 1], "b3": 1.0, "s0": 0.5, "lambda": -1.0}))
    assert run(tmp_path, "validate", "--model", str(p)) == 1
    failed = {c["assumption"] for c in report(tmp_path)["checks"] if not c["pass"]}
    assert "Assumption 5.2(3)" in failed


def test_validate_zero_row_graphon(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps({"kind": "step", "matrix": [[0, 0], [0, 1]]}))
    assert run(tmp_path, "validate", "--graphon", str(p)) == 1
    failed = {c["assumption"] for c in report(tmp_path)["checks"] if not c["pass"]}
    assert failed == {"Assumption 2.4"}


def test_config_file_with_relative_paths(tmp_path):
    (tmp_path / "g.csv").write_text("1,0.3\n0.3,1\n")
    (tmp_path / "m.json").write_text(json.dumps({"b1": -0.5, "b3": 1.0, "s0": 0.5, "q": 1.0, "lambda": 0.5,
                                                 "initial": {"mean": 1.0, "std": 0.5}}))
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"model": "m.json", "graphon": "g.csv", "sim": {"M": 2, "P": 100, "n_steps": 10}}))
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    rep = report(tmp_path)
    assert rep["config"]["M"] == 2 and rep["pontryagin_residual"] <= rep["residual_band"]
    assert (tmp_path / "out" / "solution.csv").exists()


@pytest.mark.parametrize("bad", ['{"sim": {"bogus": 1}}', '{"model": "nope.json"}', "not json",
                                 '{"sim": {"P": 0}}'])
def test_config_errors_exit_two(tmp_path, bad):
    cfg = tmp_path / "run.json"
    cfg.write_text(bad)
    assert main(["validate", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2


def test_solver_failure_exit_one(tmp_path):
    assert run(tmp_path, "solve", *SMALL, "--picard-max", "1", "--picard-tol", "1e-14") == 1


def test_oracle_tables(tmp_path):
    assert run(tmp_path, "oracle", "--steps", "10", "--assert") == 0
    lines = (tmp_path / "out" / "oracle.csv").read_text().splitlines()
    assert lines[0] == "t,label,eta,psi,m,ybar" and len(lines) == 1 + 11 * 16


def test_simulate_n(tmp_path):
    assert run(tmp_path, "simulate-n", *SMALL, "--n", "6", "--repetitions", "2", "--control", "zero") == 0
    assert report(tmp_path)["N"] == 6
    assert (tmp_path / "out" / "paths_rep1.csv").exists()


def test_threads_do_not_change_artifacts(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", *SMALL, "--threads", "1", "--out", str(a)]) == 0
    assert main(["solve", *SMALL, "--threads", "8", "--out", str(b)]) == 0
    for name in ("report.json", "solution.csv", "diagnostics.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()

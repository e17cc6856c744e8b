import csv
import os

import numpy as np
import pytest

from impulse_control.cli import VALUE_COLUMNS, main, read_values_csv, run_solve
from impulse_control.config import load_config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")


def cfg_path(name):
    return os.path.join(CONFIGS, name)


def run(*argv):
    return main(list(argv))


def small_case1(tmp_path, paths=300, extra=""):
    text = open(cfg_path("case1.ini")).read().replace("paths = 2000", f"paths = {paths}{extra}")
    p = tmp_path / "case1.ini"
    p.write_text(text)
    return str(p)


def test_solve_case1(tmp_path, capsys):
    assert run("solve", "--config", cfg_path("case1.ini"), "--out", str(tmp_path)) == 0
    raw = (tmp_path / "values.csv").read_bytes()
    assert b"\r" not in raw
    with open(tmp_path / "values.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == VALUE_COLUMNS
    at0 = [r for r in rows[1:] if abs(float(r[0])) < 1e-12][0]
    assert float(at0[2]) == pytest.approx(0.5819767, abs=1e-3)
    report = (tmp_path / "report.txt").read_text()
    assert "one-sided" in report and "structure check" in report
    assert "converged" in capsys.readouterr().out


def test_values_csv_round_trip_is_bit_exact(tmp_path):
    assert run("solve", "--config", cfg_path("ou_inventory.ini"), "--out", str(tmp_path)) == 0
    res = run_solve(load_config(cfg_path("ou_inventory.ini")))
    data = read_values_csv(tmp_path / "values.csv")
    sol = res.solution
    for name, arr in (("f_bar", sol.f_bar), ("v", sol.v), ("Mv", sol.Mv), ("h", sol.h),
                      ("dynkin_residual", sol.dynkin_residual), ("obstacle_residual", sol.obstacle_residual)):
        assert data[name].tobytes() == np.asarray(arr, float).tobytes()
    assert np.array_equal(data["target"], res.strategy.target)


def test_missing_rate_is_config_error(tmp_path, capsys):
    text = open(cfg_path("case1.ini")).read().replace("rate = 0.5\n", "")
    p = tmp_path / "bad.ini"
    p.write_text(text)
    assert run("solve", "--config", str(p), "--out", str(tmp_path)) == 1
    assert "rate" in capsys.readouterr().err


def test_zero_fixed_cost_fails_with_triangle_diagnostic(tmp_path, capsys):
    path = os.path.join(CONFIGS, "failing", "zero_cost.ini")
    assert run("solve", "--config", path, "--out", str(tmp_path)) in (2, 3)
    assert "triangle slack" in capsys.readouterr().err
    assert run("solve", "--config", path, "--out", str(tmp_path), "--strict") == 3
    assert "triangle slack" in capsys.readouterr().err


def test_simulate_case1_within_three_se(tmp_path):
    assert run("simulate", "--config", cfg_path("case1.ini"), "--out", str(tmp_path)) == 0
    text = (tmp_path / "simulation.txt").read_text()
    assert "within 3 standard errors" in text and "FLAG" not in text


def test_simulate_repeated_seed_is_byte_identical(tmp_path):
    cfg = small_case1(tmp_path)
    for d in ("a", "b", "c"):
        seed = "5" if d != "c" else "6"
        assert run("simulate", "--config", cfg, "--out", str(tmp_path / d), "--seed", seed) == 0
    a, b, c = ((tmp_path / d / "simulation.txt").read_bytes() for d in "abc")
    assert a == b and a != c


def test_strategy_file_outside_A_is_contract_violation(tmp_path, capsys):
    strat = tmp_path / "strategy.csv"
    strat.write_text("x,target\n2,0.5\n")
    cfg = small_case1(tmp_path)
    assert run("simulate", "--config", cfg, "--out", str(tmp_path), "--strategy", str(strat)) == 4
    assert "not an admissible shift" in capsys.readouterr().err


def test_strategy_file_from_disk(tmp_path):
    strat = tmp_path / "strategy.csv"
    strat.write_text("x,target\n" + "".join(f"{x:.3f},0\n" for x in np.arange(2.0, 3.0001, 0.005)))
    cfg = small_case1(tmp_path)
    assert run("simulate", "--config", cfg, "--out", str(tmp_path), "--strategy", str(strat)) == 0
    assert "strategy: file strategy.csv" in (tmp_path / "simulation.txt").read_text()
    bad = tmp_path / "bad.csv"
    bad.write_text("x,target\n0.0012,0\n")
    assert run("simulate", "--config", cfg, "--out", str(tmp_path), "--strategy", str(bad)) == 1


def test_paths_csv_written_on_request(tmp_path):
    cfg = small_case1(tmp_path, 20, "\nrecord_paths = true")
    assert run("simulate", "--config", cfg, "--out", str(tmp_path)) == 0
    assert (tmp_path / "paths.csv").read_text().startswith("path,tau,x_pre,x_post,discounted_cost\n")


def test_verify_case1_passes(tmp_path):
    assert run("verify", "--config", cfg_path("case1.ini"), "--out", str(tmp_path)) == 0
    text = (tmp_path / "verify.txt").read_text()
    assert "FAIL" not in text
    for name in ("membership", "minimality", "complementarity", "concavity", "closed-form oracle"):
        assert name in text


def test_verify_rejects_lowered_h(tmp_path):
    assert run("solve", "--config", cfg_path("case1.ini"), "--out", str(tmp_path)) == 0
    src = tmp_path / "values.csv"
    with open(src, newline="") as fh:
        rows = list(csv.reader(fh))
    for r in rows[1:]:
        if abs(float(r[0])) < 1e-12:
            r[4] = repr(float(r[4]) - 0.1)
    edited = tmp_path / "edited.csv"
    with open(edited, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    assert run("verify", "--config", cfg_path("case1.ini"), "--out", str(tmp_path), "--values", str(edited)) == 3
    assert "FAIL" in (tmp_path / "verify.txt").read_text()
    assert run("verify", "--config", cfg_path("case1.ini"), "--out", str(tmp_path), "--values", str(src)) == 0


def test_verify_no_intervention_problem(tmp_path):
    text = """
[problem]
kind = impulse
rate = 1.0
[process]
kind = brownian
boundary = reflecting
[grid]
lo = -2
hi = 2
n = 41
[reward]
value = 1
[cost]
fixed = 5
[targets]
type = all
[verify]
trials = 3
"""
    p = tmp_path / "quiet.ini"
    p.write_text(text)
    assert run("verify", "--config", str(p), "--out", str(tmp_path)) == 0
    assert "PASS  QVI complementarity" in (tmp_path / "verify.txt").read_text()
    assert run("solve", "--config", str(p), "--out", str(tmp_path)) == 0
    assert "never intervene" in (tmp_path / "report.txt").read_text()


@pytest.mark.parametrize("name", ["stopping.ini", "switching.ini", "multistop.ini", "case2.ini"])
def test_other_shipped_configs_verify(tmp_path, name):
    assert run("verify", "--config", cfg_path(name), "--out", str(tmp_path)) == 0


def test_multistop_outputs(tmp_path):
    assert run("solve", "--config", cfg_path("multistop.ini"), "--out", str(tmp_path)) == 0
    assert (tmp_path / "multistop.csv").read_text().startswith("x,v_1,v_2\n")
    assert run("simulate", "--config", cfg_path("multistop.ini"), "--out", str(tmp_path)) == 1


def test_oracle_command(tmp_path):
    assert run("oracle", "--config", cfg_path("case2.ini"), "--out", str(tmp_path)) == 0
    text = (tmp_path / "oracle.txt").read_text()
    assert "two-sided" in text and "x_star = -3.913202946957" in text
    assert (tmp_path / "oracle.csv").read_text().startswith("x,v\n")

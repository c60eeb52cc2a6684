import json
import subprocess
import sys

import numpy as np
import pytest

from bvham.cli import main
from bvham.conditions import trivial_multiplier
from bvham.config import ConfigError, compile_expr, load_config, parse_config
from bvham.fixtures import fixture_names, fixture_path
from bvham.trajectory import read_arc_csv
from bvham.transcription import write_multipliers_json


def run(*args):
    return main([str(a) for a in args])


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def write(tmp_path, obj, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj, indent=2) if not isinstance(obj, str) else obj)
    return p


# -- config parsing -----------------------------------------------------------

def test_all_fixtures_load():
    for name in fixture_names():
        load_config(fixture_path(name))


def test_missing_F_names_field(tmp_path, capsys):
    p = write(tmp_path, {"schema_version": 1, "horizon": [0, 1]})
    assert run("variation", "--config", p, "--out", tmp_path / "o") == 2
    assert "'F'" in capsys.readouterr().err


def test_malformed_json_reports_line(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config('{\n "schema_version": 1,\n "F": {\n}')
    assert exc.value.line is not None


def test_field_errors_carry_line_numbers():
    text = '{\n  "schema_version": 1,\n  "F": {"family": "blob"}\n}'
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.field == "F.family" and exc.value.line == 3


def test_schema_version_checked():
    with pytest.raises(ConfigError):
        parse_config('{"schema_version": 2, "F": {"family": "singleton", "value": ["t"]}}')


def test_tolerances_must_be_positive_and_known():
    base = {"schema_version": 1, "F": {"family": "singleton", "value": ["t"]}}
    with pytest.raises(ConfigError):
        parse_config(json.dumps({**base, "tolerances": {"kkt_tol": -1}}))
    with pytest.raises(ConfigError):
        parse_config(json.dumps({**base, "tolerances": {"made_up": 1e-3}}))


def test_cli_tol_override_validation(tmp_path):
    p = fixture_path("step")
    assert run("variation", "--config", p, "--out", tmp_path, "--tol", "kkt_tol=0") == 2
    assert run("variation", "--config", p, "--out", tmp_path, "--tol", "nope=1") == 2
    assert run("variation", "--config", p, "--out", tmp_path, "--tol", "tol_eta=1e-7") == 0


def test_coupling_enforced_at_load():
    cfg = json.load(open(fixture_path("constrained")))
    cfg["schedule"] = {"N": [16], "K": [10.0], "beta": [0.01], "alpha": [0.1]}
    with pytest.raises(ConfigError) as exc:
        parse_config(json.dumps(cfg))
    assert exc.value.field == "schedule.beta"


def test_empty_schedule_is_an_error(tmp_path):
    cfg = json.load(open(fixture_path("autonomous")))
    cfg["schedule"] = {"N": [], "K": []}
    assert run("solve", "--config", write(tmp_path, cfg), "--out", tmp_path / "o") == 2


def test_expression_whitelist():
    f = compile_expr("sin(2 * pi * t) if t < 0.5 else abs(t - 1)", ("t",))
    assert f(0.25) == pytest.approx(1.0)
    for bad in ("__import__('os')", "t.__class__", "open('x')", "lambda: 1", "[c for c in 'ab']"):
        with pytest.raises(ConfigError):
            compile_expr(bad, ("t",))


def test_compact_set_literal_in_table():
    cfg = {"schema_version": 1, "F": {"family": "polytope_table", "times": [0.0, 0.5],
                                      "vertices": [{"points": [[0.0], [1.0]], "hull": True},
                                                   {"points": [[0.0], [2.0]], "hull": True}]}}
    F = parse_config(json.dumps(cfg)).F
    assert F(0.75).bounds == (0.0, 2.0)


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert run("variation", "--config", tmp_path / "missing.json") == 2


# -- commands ---------------------------------------------------------------

def test_variation_step_and_sinusoid(tmp_path):
    assert run("variation", "--config", fixture_path("step"), "--out", tmp_path / "s") == 0
    rows = np.loadtxt(tmp_path / "s" / "staircase_d0_e0.csv", delimiter=",", skiprows=1)
    steps = np.diff(rows[:, 1])
    assert np.count_nonzero(steps) == 1 and steps.max() == 1.0
    assert rows[np.argmax(steps) + 1, 0] == 0.5
    assert run("variation", "--config", fixture_path("sinusoid"), "--out", tmp_path / "q") == 0
    summ = json.loads((tmp_path / "q" / "variation_summary.json").read_text())
    assert summ["eta"] == pytest.approx(4.0, abs=1e-3)


def test_solve_linear_bang_arc(tmp_path):
    assert run("solve", "--config", fixture_path("autonomous"), "--out", tmp_path) == 0
    x = read_arc_csv(tmp_path / "arc_1.csv")
    assert np.allclose(x.values[:, 0], x.grid, atol=1e-9)
    for name in ("multipliers_0.json", "trace_0.csv", "report_0.json", "solve_summary.json"):
        assert (tmp_path / name).exists()


def test_solve_constrained_support(tmp_path):
    assert run("solve", "--config", fixture_path("constrained"), "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report_0.json").read_text())
    x = read_arc_csv(tmp_path / "arc_0.csv").values[:, 0]
    beta = rep["beta"]
    active = [j for j in range(len(x) - 1) if x[j] - 0.5 - beta >= -1e-9]
    assert rep["mu_support_cells"] == active and active


def test_check_pipeline_multipliers_exit_0(tmp_path):
    for name in ("autonomous", "jump", "fixed_both"):
        out = tmp_path / name
        assert run("solve", "--config", fixture_path(name), "--out", out) == 0
        assert run("check", "--config", fixture_path(name), "--multipliers", out / "multipliers_0.json",
                   "--arc", out / "arc_0.csv", "--out", out) == 0


def test_check_trivial_multiplier_fails(tmp_path, capsys):
    cfgp = fixture_path("boundary_start")
    assert run("solve", "--config", cfgp, "--out", tmp_path) == 0
    cfg = load_config(cfgp)
    x = read_arc_csv(tmp_path / "arc_0.csv")
    write_multipliers_json(tmp_path / "triv.json", trivial_multiplier(cfg.problem, x))
    code = run("check", "--config", cfgp, "--multipliers", tmp_path / "triv.json", "--arc", tmp_path / "arc_0.csv",
               "--out", tmp_path / "c")
    assert code == 1
    rep = json.loads((tmp_path / "c" / "check_report.json").read_text())
    assert rep["verdicts"]["conditions"] and not rep["verdicts"]["nondegeneracy"]
    assert "nondegeneracy: FAIL" in capsys.readouterr().out


def test_check_malformed_multipliers(tmp_path):
    bad = write(tmp_path, '{"grid": [0, 1', "m.json")
    assert run("check", "--config", fixture_path("autonomous"), "--multipliers", bad, "--out", tmp_path) == 2


def test_certify_lipschitz(tmp_path):
    assert run("certify-lipschitz", "--config", fixture_path("step_potential"), "--out", tmp_path) == 0
    cert = json.loads((tmp_path / "certificate.json").read_text())
    assert cert["verdict"] == "Lipschitz certified" and cert["hypotheses"]["passed"]


def test_outputs_are_byte_identical(tmp_path):
    for cmd, name in (("variation", "jump"), ("solve", "jump")):
        a, b = tmp_path / f"{cmd}a", tmp_path / f"{cmd}b"
        assert run(cmd, "--config", fixture_path(name), "--out", a) == 0
        assert run(cmd, "--config", fixture_path(name), "--out", b) == 0
        assert files(a) == files(b)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "bvham", "variation", "--config", fixture_path("step"),
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0 and "variation:" in r.stdout

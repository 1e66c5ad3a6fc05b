import json
from pathlib import Path

import pytest

from delayopt.cli import main


SPECS = Path(__file__).resolve().parent.parent / "specs"
SPEC = str(SPECS / "advertising.json")


def run(argv):
    return main(argv)


def test_unknown_flag_exits_one(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["operators", "--spec", SPEC, "--nope"])
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_missing_spec_file_exits_one(capsys):
    assert run(["operators", "--spec", "/no/such/file.json", "--out", "/tmp/x"]) == 1
    err = capsys.readouterr().err
    assert json.loads(err.splitlines()[-1])["error"] == "validation"


def test_invalid_model_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": "nope", "m": 4, "params": {}}')
    assert run(["operators", "--spec", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_operators_artifacts(tmp_path, capsys):
    out = tmp_path / "ops"
    assert run(["operators", "--spec", str(SPECS / "affine.json"), "--out", str(out),
                "--samples", "100", "--svg"]) == 0
    for name in ("spectrum.csv", "forms_report.csv", "norm_audit.csv",
                 "tail_norms.csv", "trace_report.csv", "counterexample.csv",
                 "gates.csv", "run_manifest.json", "spectrum.svg"):
        assert (out / name).exists()
    spectrum = (out / "spectrum.csv").read_text().splitlines()
    assert spectrum[0] == "index,eigenvalue"
    assert len(spectrum) > 10
    # the counterexample rows keep the functional near one as the norm falls
    ce = [r.split(",") for r in (out / "counterexample.csv").read_text().splitlines()[1:]]
    norms = [float(r[1]) for r in ce]
    assert norms == sorted(norms, reverse=True)
    assert all(abs(float(r[2]) - 1.0) < 0.2 for r in ce)


def test_reproducible_csv_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["operators", "--spec", str(SPECS / "affine.json"), "--out",
                    str(out), "--samples", "64"]) == 0
    for name in ("spectrum.csv", "forms_report.csv", "norm_audit.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_simulate_and_value(tmp_path):
    out = tmp_path / "sim"
    assert run(["simulate", "--spec", SPEC, "--T", "1", "--dt", "0.01",
                "--paths", "16", "--out", str(out), "--control", "const:0.5"]) == 0
    rows = (out / "summary.csv").read_text().splitlines()
    assert rows[0] == "mean,stderr,T_trunc"
    assert (out / "paths.csv").exists()
    out2 = tmp_path / "val"
    assert run(["value", "--spec", SPEC, "--T", "1", "--dt", "0.01",
                "--paths", "16", "--out", str(out2)]) == 0


def test_solve_policy_roundtrip(tmp_path):
    out = tmp_path / "solve"
    assert run(["solve", "--spec", SPEC, "--mlag", "2", "--grid",
                "y:-1:2.5:17,y_lag1:-1:2.5:7,y_lag2:-1:2.5:7",
                "--tol", "1e-7", "--out", str(out)]) == 0
    assert (out / "value_policy.csv").exists()
    policy_file = out / "policy.json"
    assert policy_file.exists()
    out2 = tmp_path / "closed"
    assert run(["simulate", "--spec", SPEC, "--T", "1", "--dt", "0.05",
                "--paths", "8", "--out", str(out2),
                "--control", f"policy:{policy_file}"]) == 0


def test_solve_portfolio_head_grid(tmp_path):
    # the documented head-grid form: both head axes named, lags collapsed
    out = tmp_path / "mer"
    assert run(["solve", "--spec", str(SPECS / "merton_delay.json"), "--mlag", "1",
                "--grid", "s:0.5:2:9,z:0.5:2:9", "--tol", "1e-5",
                "--out", str(out)]) == 0
    header = (out / "value_policy.csv").read_text().splitlines()[0]
    assert header.startswith("s,z,s_lag1,z_lag1,value,control_index")


def test_solve_grid_validation(tmp_path):
    assert run(["solve", "--spec", SPEC, "--mlag", "1", "--grid", "bogus:0:1:5",
                "--out", str(tmp_path / "x")]) == 1
    assert run(["solve", "--spec", SPEC, "--mlag", "1", "--grid", "y:0:1",
                "--out", str(tmp_path / "y")]) == 1


def test_lift_check(tmp_path):
    out = tmp_path / "lift"
    assert run(["lift-check", "--spec", SPEC, "--T", "0.5", "--dt", "0.002",
                "--out", str(out)]) == 0
    rows = (out / "lift_report.csv").read_text().splitlines()
    assert rows[0].startswith("delta,m,head_mismatch")
    assert len(rows) == 3


def test_dpp_subcommand(tmp_path):
    out = tmp_path / "dpp"
    assert run(["dpp", "--spec", SPEC, "--mlag", "2", "--grid",
                "y:-1:2.5:17,y_lag1:-1:2.5:7,y_lag2:-1:2.5:7",
                "--tau-steps", "2", "--paths", "2000", "--out", str(out)]) == 0
    row = (out / "dpp.csv").read_text().splitlines()[1].split(",")
    assert row[-1] == "1"


def test_residual_subcommand(tmp_path):
    out = tmp_path / "res"
    assert run(["residual", "--spec", SPEC, "--mlag", "1", "--grid",
                "y:-1:2.5:17,y_lag1:-1:2.5:7", "--samples", "10",
                "--out", str(out)]) == 0
    assert (out / "residual.csv").exists()


def test_probe_regularity_subcommand(tmp_path):
    out = tmp_path / "reg"
    assert run(["probe-regularity", "--spec", str(SPECS / "merton_nodelay.json"),
                "--mlag", "1", "--grid", "z:log:0.005:100:281", "--tol", "1e-7",
                "--box", "z:0.5:2.0", "--out", str(out)]) == 0
    header = (out / "regularity.csv").read_text().splitlines()[0]
    assert header == "lipschitz,alpha_hat,alpha_lo,alpha_hi,flags"


def test_probe_bcontinuity_subcommand(tmp_path):
    out = tmp_path / "bc"
    assert run(["probe-bcontinuity", "--spec", SPEC, "--T", "2", "--dt", "0.02",
                "--paths", "48", "--pairs", "10", "--out", str(out)]) == 0
    rows = (out / "bcontinuity.csv").read_text().splitlines()
    assert rows[0] == "weak_distance,difference,stderr"
    assert len(rows) == 11


def test_manifest_records_spec_digest(tmp_path):
    out = tmp_path / "m"
    assert run(["operators", "--spec", str(SPECS / "affine.json"), "--out", str(out),
                "--samples", "32"]) == 0
    doc = json.loads((out / "run_manifest.json").read_text())
    assert doc["spec_digest"] and doc["version"]
    assert any(a.endswith("spectrum.csv") for a in doc["artifacts"])

import json
import shutil
import subprocess

import pandas as pd
import pytest

from dpadapt.cli import main
from dpadapt.privacy import AccountantLedger, account_detail, accountant_multiplier


@pytest.fixture
def config(tmp_path):
    cfg = {
        "problem": {"kind": "abs_regression", "n": 150, "d": 4, "tau": 0.01, "seed": 1},
        "methods": [{"name": "pagan", "algorithm": "pagan", "metric": "pagan_optimal", "clip_B": {"quantile": 0.9}},
                    {"name": "adagrad", "algorithm": "adagrad"}],
        "epsilons": [2.0], "stepsizes": [0.1, 0.5], "batch": 10, "repetitions": 2, "steps": 20, "seed": 3,
        "log_every": 5,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_gen_data(tmp_path):
    out = tmp_path / "data" / "d.csv"
    assert main(["gen-data", "--n", "40", "--d", "3", "--out", str(out), "--seed", "2"]) == 0
    df = pd.read_csv(out)
    assert list(df.columns) == ["f0", "f1", "f2", "y"] and len(df) == 40
    assert len(json.loads((tmp_path / "data" / "d.csv.json").read_text())["x_star"]) == 3


def test_gen_data_needs_out():
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--n", "4"])
    assert exc.value.code == 2


def test_run(config, tmp_path):
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "r"), "--stepsize", "0.5"]) == 0
    trace = pd.read_csv(tmp_path / "r" / "trace.csv")
    assert trace["iteration"].tolist() == [5, 10, 15, 20]
    info = json.loads((tmp_path / "r" / "run.json").read_text())
    assert info["method"] == "pagan" and info["stepsize"] == 0.5 and info["epsilon"] == 2.0


def test_run_unknown_method(config, tmp_path):
    assert main(["run", "--config", str(config), "--out", str(tmp_path), "--method", "zzz"]) == 2


def test_sweep_and_report(config, tmp_path):
    out = tmp_path / "s"
    assert main(["sweep", "--config", str(config), "--out", str(out), "--seed", "11"]) == 0
    for name in ("table.csv", "best.csv", "summary.csv", "final.csv", "curve_pagan_eps2.csv"):
        assert (out / name).exists()
    table = pd.read_csv(out / "table.csv")
    assert len(table) == (2 + 2) * 2 * 4
    assert main(["report", "--table", str(out / "table.csv"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "final.csv").exists()


def test_sweep_seed_override_deterministic(config, tmp_path):
    main(["sweep", "--config", str(config), "--out", str(tmp_path / "a"), "--seed", "11"])
    main(["sweep", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "11", "--jobs", "2"])
    pd.testing.assert_frame_equal(pd.read_csv(tmp_path / "a" / "table.csv"), pd.read_csv(tmp_path / "b" / "table.csv"))


def test_estimate(tmp_path, capsys):
    data = tmp_path / "d.csv"
    main(["gen-data", "--n", "300", "--d", "4", "--out", str(data)])
    capsys.readouterr()
    assert main(["estimate", "--data", str(data), "--epsilon", "5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["sigma_hat"]) == 4 and len(out["C_hat"]) == 4
    r = out["r"]
    for s, c in zip(out["sigma_hat"], out["C_hat"]):
        assert c == pytest.approx((r * s) ** (-4 / 3) / 4)


def test_accountant(capsys):
    assert main(["accountant", "--n", "2000", "--b", "50", "-T", "100", "--scale", "0.05"]) == 0
    eps = float(capsys.readouterr().out)
    ref = account_detail(AccountantLedger().add(50 / 2000, accountant_multiplier(0.05, 50), 100), 1e-5).epsilon
    assert eps == pytest.approx(ref, rel=1e-5)
    assert main(["accountant", "--n", "2000", "--b", "50", "-T", "100", "--scale", "0.05", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["noise_multiplier"] == pytest.approx(1.25)


def test_verify(tmp_path):
    out = tmp_path / "v.json"
    assert main(["verify", "--trials", "2000", "--out", str(out)]) == 0
    reports = json.loads(out.read_text())
    assert [r["name"] for r in reports] == ["projection_bias", "sum_inequality", "truncation_bias", "concentration"]
    assert all(r["passed"] and r["violations"] <= r["trials"] for r in reports)


@pytest.mark.parametrize("argv,code", [
    (["run", "--config", "/nonexistent/cfg.json"], 3),
    (["report", "--table", "/nonexistent/t.csv"], 3),
    (["accountant", "--n", "10", "--b", "20", "-T", "1", "--scale", "1"], 2),
    (["accountant", "--n", "100", "--b", "20", "-T", "1", "--scale", "1", "--delta", "2"], 2),
    (["run"], 2),
])
def test_exit_codes(argv, code):
    assert main(argv) == code


def test_bad_config_exit(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["sweep", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"methods": [], "stepsizes": [1], "batch": 1, "problem": {}}))
    assert main(["sweep", "--config", str(bad)]) == 2


def test_unwritable_output(config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["sweep", "--config", str(config), "--out", str(blocker / "sub")]) == 3


def test_bad_seed():
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--seed", "-1"])
    assert exc.value.code == 2


@pytest.mark.skipif(shutil.which("dpadapt") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["dpadapt", "accountant", "--n", "100", "--b", "10", "-T", "5", "--scale", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and float(proc.stdout) > 0

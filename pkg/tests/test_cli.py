import csv
import filecmp
import json
import subprocess
import sys

import pytest

from deconfts import cli
from deconfts import evaluation as ev
from deconfts.simgen import read_dataset

FAST = ["--set", "factor.epochs=2", "--set", "forecaster.epochs=1", "--set", "forecaster.hidden_dim=4",
        "--set", "factor.hidden_dim=4"]


def run(*argv):
    return cli.main(list(argv))


def test_version_flag():
    out = subprocess.run([sys.executable, "-m", "deconfts.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "schema" in out.stdout


def test_simulate_twice_byte_identical(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("[sim]\nn_sequences = 4\nT = 12\nk = 2\nseed = 5\n")
    for name in ("a", "b"):
        assert run("simulate", "--config", str(cfg), "--out", str(tmp_path / name)) == 0
    for f in ("dataset.csv", "dataset.manifest.json"):
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)


def test_default_seed_echoed(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("[sim]\nn_sequences = 2\nT = 5\n")
    assert run("simulate", "--config", str(cfg), "--out", str(tmp_path)) == 0
    manifest = json.loads((tmp_path / "dataset.manifest.json").read_text())
    assert manifest["seed"] == 0


def test_invalid_gamma_exit_code(tmp_path, capsys):
    assert run("simulate", "--set", "sim.gamma_a=1.5", "--out", str(tmp_path)) == 1
    assert "gamma_a" in capsys.readouterr().err
    assert not (tmp_path / "dataset.csv").exists()


def test_env_var_output_dir(tmp_path):
    env = {"DECONFTS_OUT_DIR": str(tmp_path / "envout"), "PATH": ""}
    out = subprocess.run([sys.executable, "-m", "deconfts.cli", "simulate", "--set", "sim.n_sequences=1",
                          "--set", "sim.T=3"], capture_output=True, text=True, env=env, cwd=tmp_path)
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "envout" / "dataset.csv").exists()
    assert out.stdout == ""


def test_missing_dataset_is_validation_error(tmp_path):
    assert run("train-factor", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path)) == 1
    assert run("train-factor", "--out", str(tmp_path)) == 1


def test_divergence_exit_code(tmp_path):
    assert run("train-factor", "--data", "tiny", "--out", str(tmp_path), "--set", "factor.learning_rate=1e300",
               "--set", "factor.init_scale=1", "--set", "factor.epochs=2") == 2


def test_pipeline(tmp_path):
    out = str(tmp_path)
    assert run("simulate", "--out", out, "--set", "sim.n_sequences=6", "--set", "sim.T=30") == 0
    data = str(tmp_path / "dataset.csv")
    assert run("train-factor", "--data", data, "--out", out, *FAST) == 0
    with open(tmp_path / "factor_loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "factor_loss", "aligned_r2"] and len(rows) == 3

    factor = str(tmp_path / "factor.json")
    common = ["--data", data, "--out", out, "--factor", factor, "--set", "forecaster.sl=10",
              "--set", "forecaster.pl=4", "--set", "forecaster.use_confounder=true", *FAST]
    assert run("train-forecaster", *common) == 0
    assert run("evaluate", *common, "--forecaster", str(tmp_path / "forecaster.json")) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["n_windows"] == 6 * 17
    assert {"mse", "mae", "rmse", "r2", "confounder_aligned_r2"} <= set(metrics)

    assert run("train-forecaster", *common, "--set", "forecaster.joint_mode=true") == 0
    assert (tmp_path / "factor_joint.json").exists()


def test_forecaster_without_factor(tmp_path):
    assert run("train-forecaster", "--data", "tiny", "--out", str(tmp_path),
               "--set", "forecaster.use_confounder=true") == 1


def test_ingest_command(tmp_path):
    fixture = str(__import__("pathlib").Path(__file__).parent / "data" / "gps_200.csv")
    assert run("ingest", "--input", fixture, "--out", str(tmp_path), "--set", "ingest.seq_len=10") == 0
    ds = read_dataset(tmp_path / "dataset.csv")
    assert ds.T == 10 and ds.k == 3 and not ds.has_confounder


def test_ingest_parse_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("entity_id,timestamp,lat,lon\na,1,95,0\n")
    assert run("ingest", "--input", str(bad), "--out", str(tmp_path)) == 1
    assert "line 2" in capsys.readouterr().err


def _experiment(out, *extra):
    return run("experiment", "--data", "tiny", "--out", str(out), *FAST, *extra)


def test_experiment_on_tiny_dataset(tmp_path):
    assert _experiment(tmp_path) == 0
    rows = ev.read_results(tmp_path / "results.csv")
    assert len(rows) == ev.GridSpec().size() == 24
    assert (tmp_path / "summary.json").exists() and (tmp_path / "run.cfg").exists()
    assert (tmp_path / "diagnostics_seed0.csv").exists()


def test_experiment_repeatable(tmp_path):
    assert _experiment(tmp_path / "a") == 0
    assert _experiment(tmp_path / "b") == 0
    assert filecmp.cmp(tmp_path / "a" / "results.csv", tmp_path / "b" / "results.csv", shallow=False)


def test_parallel_matches_serial(tmp_path):
    assert _experiment(tmp_path / "serial") == 0
    assert _experiment(tmp_path / "par", "--parallel", "2") == 0
    assert filecmp.cmp(tmp_path / "serial" / "results.csv", tmp_path / "par" / "results.csv", shallow=False)


def test_interrupted_run_leaves_valid_csv(tmp_path, monkeypatch):
    real = ev._run_cell
    calls = {"n": 0}

    def flaky(job):
        calls["n"] += 1
        if calls["n"] == 6:
            raise KeyboardInterrupt
        return real(job)

    monkeypatch.setattr(ev, "_run_cell", flaky)
    with pytest.raises(KeyboardInterrupt):
        _experiment(tmp_path)
    rows = ev.read_results(tmp_path / "results.csv")
    assert len(rows) == 5
    assert all(float(r["mse"]) >= 0 for r in rows)


def test_infeasible_experiment(tmp_path, capsys):
    assert _experiment(tmp_path, "--set", "grid.sl=90") == 1
    assert "infeasible" in capsys.readouterr().err
    assert not (tmp_path / "results.csv").exists()


def test_gradcheck_passes(capsys):
    assert run("gradcheck") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    families = {line.split()[0] for line in lines}
    assert {"factor", "linear", "mlp", "attention"} <= families
    assert all(line.endswith("ok") for line in lines)


def test_gradcheck_corrupted(capsys):
    assert run("gradcheck", "--corrupt", "mlp:hidden.W") == 2
    captured = capsys.readouterr()
    assert "mlp:hidden.W" in captured.err
    assert "FAIL" in captured.out

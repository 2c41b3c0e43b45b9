import json

import numpy as np
import pytest

from gvf_acc import cli
from gvf_acc.evaluation import EXPORT_COLUMNS, Metrics, read_result_csv
from gvf_acc.learner import GvfModel
from gvf_acc.network import DenseNet

from helpers import constant_model


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("GVF_ACC_OUT", str(tmp_path / "runs"))
    return tmp_path


def _save(model, path):
    model.save(path)
    return path


def test_missing_config_file(out, capsys):
    assert run("train", "--question", "front", "--config", out / "nope.yaml", "--steps", 10) == cli.EXIT_CONFIG
    assert "cannot read" in capsys.readouterr().err


def test_unknown_config_key(out):
    assert run("train", "--question", "front", "--set", "learner.lr=1", "--steps", 10) == cli.EXIT_CONFIG


def test_unknown_scenario(out, capsys):
    assert run("eval", "--scenario", "cliff", "--controller", "baseline") == cli.EXIT_CONFIG
    assert "emergency_stop" in capsys.readouterr().err


def test_train_writes_model_log_and_config(out, capsys):
    assert run("train", "--question", "rear", "--gamma", 0.9, "--steps", 300, "--seed", 3) == cli.EXIT_OK
    run_dir = out / "runs" / "train-rear-g0.9-s3"
    model = GvfModel.load(run_dir / "model.json")
    assert model.question.gamma == 0.9 and model.kind.value == "rear"
    assert len((run_dir / "train_log.csv").read_text().splitlines()) == 301
    assert "seed: 3" in (run_dir / "config.yaml").read_text()
    assert "trained rear gamma=0.9 steps=300" in capsys.readouterr().out


def test_divergence_exit_code(out, capsys):
    code = run("train", "--question", "speed", "--steps", 2000,
               "--set", "learner.optimizer=sgd", "--set", "learner.learning_rate=1e3")
    assert code == cli.EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_eval_outputs_round_trip(out, capsys):
    front = _save(constant_model("front", 0.95), out / "front.json")
    speed = _save(constant_model("speed", 20.0), out / "speed.json")
    code = run("eval", "--scenario", "follow_and_stop", "--controller", "rule_with_speed",
               "--models", front, speed, "--run-dir", out / "ev", "--set", "scenarios.follow_and_stop.duration=4")
    assert code == cli.EXIT_OK
    cols = read_result_csv(out / "ev" / "trajectory.csv")
    assert tuple(cols) == EXPORT_COLUMNS and len(cols["t"]) == 81
    m = Metrics.from_json((out / "ev" / "trajectory_metrics.json").read_text())
    assert f"collided={str(m.collided).lower()}" in capsys.readouterr().out


def test_speed_model_in_front_slot(out, capsys):
    speed = _save(constant_model("speed", 20.0), out / "speed.json")
    assert run("eval", "--scenario", "emergency_stop", "--controller", "fuzzy", "--models", speed) == cli.EXIT_MISMATCH
    assert "front" in capsys.readouterr().err


def test_duplicate_and_unreadable_models(out):
    front = _save(constant_model("front", 0.95), out / "front.json")
    twin = _save(constant_model("front", 0.9), out / "front2.json")
    assert run("eval", "--scenario", "emergency_stop", "--controller", "baseline",
               "--models", front, twin) == cli.EXIT_MISMATCH
    (out / "junk.json").write_text("{}")
    assert run("eval", "--scenario", "emergency_stop", "--controller", "baseline",
               "--models", out / "junk.json") == cli.EXIT_MISMATCH
    assert run("eval", "--scenario", "emergency_stop", "--controller", "baseline",
               "--models", out / "absent.json") == cli.EXIT_MISMATCH


def test_zone_mismatch(out):
    front = _save(constant_model("front", 0.95), out / "front.json")
    assert run("eval", "--scenario", "robot_approach", "--controller", "rule_without_speed",
               "--models", front) == cli.EXIT_MISMATCH


def test_sweep_missing_model(out, capsys):
    assert run("sweep", "--gammas", 0.95) == cli.EXIT_MISMATCH
    assert "--train-missing" in capsys.readouterr().err


def test_sweep_reads_train_layout(out, capsys):
    cfg = cli.load_config()
    for g in (0.95, 0.975):
        path = cli.train_run_dir(cfg, "front", g) / "model.json"
        path.parent.mkdir(parents=True)
        _save(constant_model("front", 0.9, gamma=g), path)
    code = run("sweep", "--gammas", 0.95, 0.975, "--set", "scenarios.emergency_stop.duration=2")
    assert code == cli.EXIT_OK
    sweep_dir = out / "runs" / "sweep-emergency_stop-cruise"
    assert (sweep_dir / "crossing_times.csv").read_text().splitlines()[0] == "gamma,crossing_time"
    assert (sweep_dir / "trajectory_g0.975.csv").exists()
    assert "never" in capsys.readouterr().out


def test_sweep_rejects_wrong_gamma(out):
    cfg = cli.load_config()
    path = cli.train_run_dir(cfg, "front", 0.95) / "model.json"
    path.parent.mkdir(parents=True)
    _save(constant_model("front", 0.9, gamma=0.5), path)
    assert run("sweep", "--gammas", 0.95) == cli.EXIT_MISMATCH


def test_grad_check_passes_and_vacuous(capsys):
    assert run("grad-check", "--trials", 5) == cli.EXIT_OK
    assert run("grad-check", "--trials", 0) == cli.EXIT_OK
    assert "vacuous" in capsys.readouterr().out
    assert run("grad-check", "--trials", -1) == cli.EXIT_CONFIG


def test_grad_check_reports_corrupted_layer(monkeypatch, capsys):
    real = DenseNet.backward

    def broken(self, x):
        g = real(self, x)
        g[0] += 1.0
        return g

    monkeypatch.setattr(DenseNet, "backward", broken)
    assert run("grad-check", "--trials", 3) == cli.EXIT_CHECK
    assert "layer 0" in capsys.readouterr().err


def test_export_prediction_grid(out):
    front = _save(constant_model("front", 0.25), out / "front.json")
    target = out / "grid.csv"
    assert run("export", "--model", front, "--n-points", 3, "--n-actions", 2,
               "--feature", "ego_speed=0.5", "--out", target) == cli.EXIT_OK
    lines = target.read_text().splitlines()
    assert lines[0] == "front_gap,action,prediction" and len(lines) == 7
    np.testing.assert_allclose([float(r.split(",")[2]) for r in lines[1:]], 0.25)
    assert run("export", "--model", front, "--sweep", "altitude") == cli.EXIT_CONFIG
    assert run("export") == cli.EXIT_CONFIG


def test_export_default_config(out, capsys):
    assert run("export", "--default-config") == cli.EXIT_OK
    assert "learner:" in capsys.readouterr().out


def test_verbose_flag_is_accepted(out):
    assert run("-v", "grad-check", "--trials", 1) == cli.EXIT_OK


def test_model_file_is_json(out):
    path = _save(constant_model("rear", 0.8), out / "r.json")
    doc = json.loads(path.read_text())
    assert doc["meta"]["cumulant"] == "rear"

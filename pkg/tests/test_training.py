import json

import pytest
import torch

import orfnet.training as training
from conftest import pools_for
from orfnet.errors import ConfigError, NumericalError
from orfnet.model import load_checkpoint
from orfnet.training import ExperimentConfig, evaluate, load_config, run_training


def run(tmp_path, data, name, **kw):
    cfg = ExperimentConfig(output_dir=str(tmp_path / name), **kw)
    art = run_training(cfg, pools=pools_for(data, cfg.forms), eval_samples=data["test"])
    return cfg, art


def log_lines(art):
    return art.loss_log.read_text().splitlines()


def test_zero_iterations_keeps_initial_checkpoint(tmp_path, tiny_data):
    _, art = run(tmp_path, tiny_data, "z", iterations=0)
    assert [p.name for p in art.checkpoints] == ["ckpt-000000.bin"]
    assert log_lines(art) == []
    assert art.report.map < 0.05  # untrained model


def test_box_only_weak_terms_identically_zero(tmp_path, tiny_data):
    _, art = run(tmp_path, tiny_data, "b", regime="box_only", iterations=20)
    for line in log_lines(art):
        losses = json.loads(line)["losses"]
        assert all(losses[k] == 0.0 for k in ("pos_d", "neg_d", "pos_u", "neg_u"))
        assert losses["reg_b"] > 0


def test_runs_are_deterministic(tmp_path, tiny_data):
    training.apply_thread_env(True)
    _, a = run(tmp_path, tiny_data, "a", iterations=40, burn_in=10)
    _, b = run(tmp_path, tiny_data, "b", iterations=40, burn_in=10)
    assert a.loss_log.read_bytes() == b.loss_log.read_bytes()
    assert a.report.as_record() == b.report.as_record()
    assert (a.output_dir / "ckpt-000040.bin").read_bytes() == (b.output_dir / "ckpt-000040.bin").read_bytes()


def test_zero_weights_with_burn_in_reduce_to_box_only(tmp_path, tiny_data):
    _, base = run(tmp_path, tiny_data, "base", regime="box_only", iterations=30)
    cfg = ExperimentConfig(output_dir=str(tmp_path / "full"), iterations=30, burn_in=30)
    cfg.loss.lam = cfg.loss.beta = 0.0
    full = run_training(cfg, pools=pools_for(tiny_data, cfg.forms), eval_samples=tiny_data["test"])
    keys = ("reg_b", "pos_b", "neg_b")
    for x, y in zip(log_lines(base), log_lines(full)):
        x, y = json.loads(x), json.loads(y)
        assert [x["losses"][k] for k in keys] == [y["losses"][k] for k in keys]
    a = load_checkpoint(base.checkpoints[-1], cfg.model)
    b = load_checkpoint(full.checkpoints[-1], cfg.model)
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        if not n.startswith(("heads.cls_dot", "heads.cls_unlabeled")):
            assert torch.equal(p, q), n


def test_nan_loss_aborts_and_keeps_last_good(tmp_path, tiny_data, monkeypatch):
    real = training.total_loss
    calls = {"n": 0}

    def poisoned(report, config):
        calls["n"] += 1
        out = real(report, config)
        return out * float("nan") if calls["n"] == 4 else out

    monkeypatch.setattr(training, "total_loss", poisoned)
    cfg = ExperimentConfig(output_dir=str(tmp_path / "nan"), iterations=10)
    with pytest.raises(NumericalError):
        run_training(cfg, pools=pools_for(tiny_data, cfg.forms), evaluate_split=False)
    good = load_checkpoint(tmp_path / "nan" / "last-good.bin", cfg.model)
    assert good.iteration == 3
    assert len((tmp_path / "nan" / "losses.jsonl").read_text().splitlines()) == 3


def test_evaluation_is_repeatable(tmp_path, tiny_data):
    cfg, art = run(tmp_path, tiny_data, "e", iterations=5)
    state = load_checkpoint(art.checkpoints[-1], cfg.model)
    r1, _ = evaluate(state.model, tiny_data["test"], cfg)
    r2, _ = evaluate(state.model, tiny_data["test"], cfg)
    assert r1.as_record() == r2.as_record() == art.report.as_record()


def test_config_round_trip_and_validation(tmp_path):
    cfg = ExperimentConfig(regime="box+dot", iterations=7)
    cfg.loss.gamma = 1.5
    cfg.dump(tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict()
    (tmp_path / "bad.yaml").write_text("regime: box_only\nwhatever: 1\n")
    with pytest.raises(ConfigError, match="whatever"):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "bad2.yaml").write_text("loss: {gamma: -1}\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad2.yaml")
    with pytest.raises(ConfigError):
        ExperimentConfig(regime="dot_only")


def test_artifact_config_reproduces_report(tmp_path, tiny_data):
    training.apply_thread_env(True)
    cfg, art = run(tmp_path, tiny_data, "first", iterations=15)
    again = load_config(art.output_dir / "config.yaml")
    again.output_dir = str(tmp_path / "second")
    art2 = run_training(again, pools=pools_for(tiny_data, again.forms), eval_samples=tiny_data["test"])
    assert art2.report.as_record() == art.report.as_record()

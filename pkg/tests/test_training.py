import json

import numpy as np
import pytest
import torch

from speakstyle.errors import ConfigError, NonFiniteLoss, ShapeMismatch, TooShort
from speakstyle.model import ModelConfig
from speakstyle.training import (TrainConfig, Trainer, loss_rec, loss_total,
                                 loss_vel)


def test_loss_rec_oracle():
    y = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    y_hat = torch.tensor([[0.5, 1.0], [1.0, 0.5]])
    assert loss_rec(y, y_hat).item() == pytest.approx(0.25, abs=1e-7)
    assert loss_rec(y, y_hat, reduction="sum").item() == pytest.approx(
        1.0, abs=1e-7)
    with pytest.raises(ShapeMismatch):
        loss_rec(y, y_hat[:1])


def test_loss_vel_oracle():
    """Two frames jumping 0 to 1 against a flat prediction cost exactly 1."""
    y = torch.tensor([[0.0], [1.0]])
    y_hat = torch.tensor([[0.0], [0.0]])
    assert loss_vel(y, y_hat).item() == pytest.approx(1.0, abs=1e-7)


def test_loss_vel_random_oracle(rng):
    for _ in range(20):
        t = int(rng.integers(2, 9))
        y = torch.tensor(rng.random((t, 5)))
        y_hat = torch.tensor(rng.random((t, 5)))
        expected = np.abs(np.diff(y.numpy(), axis=0)
                          - np.diff(y_hat.numpy(), axis=0)).mean()
        assert loss_vel(y, y_hat).item() == pytest.approx(expected, rel=1e-9)


def test_loss_vel_needs_two_frames():
    with pytest.raises(TooShort):
        loss_vel(torch.zeros(1, 3), torch.zeros(1, 3))


def test_loss_total_weighting():
    components = {"a": torch.tensor(2.0), "b": torch.tensor(3.0)}
    total = loss_total(components, {"a": 0.5, "b": 2.0})
    assert total.item() == pytest.approx(4.0 + 3.0, abs=1e-7)
    assert loss_total({}, None).item() == 0.0


def test_loss_total_rejects_nonfinite():
    with pytest.raises(NonFiniteLoss) as err:
        loss_total({"rec": torch.tensor(float("nan"))})
    assert "rec" in str(err.value)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(curriculum_masked_ratio=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(classifier_refresh_steps=-1)
    with pytest.raises(ConfigError):
        TrainConfig(classifier_buffer_steps=0)


def test_train_config_from_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({
        "steps": 5, "batch_size": 2,
        "model": {"model_dim": 32, "style_dim": 16, "heads": 2},
    }))
    cfg = TrainConfig.from_json(path)
    assert cfg.steps == 5
    assert cfg.model.model_dim == 32
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        TrainConfig.from_json(bad)
    extra = tmp_path / "extra.json"
    extra.write_text(json.dumps({"steps": 5, "unknown_key": 1}))
    with pytest.raises(ConfigError):
        TrainConfig.from_json(extra)


def _tiny_train_config(**overrides):
    model = ModelConfig(model_dim=32, style_dim=16, feature_dim=64,
                        encoder_layers=1, decoder_layers=1, heads=2)
    defaults = dict(seed=3, steps=4, batch_size=2, adv_warmup=2,
                    log_every=2, model=model)
    defaults.update(overrides)
    return TrainConfig(**defaults)


def test_trainer_rejects_bad_corpus(small_corpus, tmp_path):
    with pytest.raises(ConfigError):
        Trainer([], _tiny_train_config(), tmp_path)
    bad_model = ModelConfig(model_dim=32, style_dim=16, feature_dim=64,
                            encoder_layers=1, decoder_layers=1, heads=2,
                            num_identities=2)
    with pytest.raises(ConfigError):
        # corpus has identities 0..3, model only accepts 2
        Trainer(small_corpus, _tiny_train_config(model=bad_model), tmp_path)


def test_trainer_runs_and_logs(small_corpus, tmp_path):
    trainer = Trainer(small_corpus, _tiny_train_config(), tmp_path)
    metrics = trainer.train()
    assert metrics["step"] == 3
    for key in ("total", "rec", "vel", "spk", "dur", "pho", "disc"):
        assert key in metrics
        assert np.isfinite(metrics[key])
    log_lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(log_lines) == 2  # steps 1 and 3 at log_every=2
    for line in log_lines:
        parsed = json.loads(line)
        assert "step" in parsed
    assert (tmp_path / "checkpoint_final.ckpt").exists()


def test_trainer_deterministic(small_corpus, tmp_path):
    m1 = Trainer(small_corpus, _tiny_train_config(),
                 tmp_path / "run1").train()
    m2 = Trainer(small_corpus, _tiny_train_config(),
                 tmp_path / "run2").train()
    assert m1 == m2


def test_trainer_resume_is_exact(small_corpus, tmp_path):
    cfg = _tiny_train_config(steps=6, checkpoint_every=3)
    full = Trainer(small_corpus, cfg, tmp_path / "full").train()
    resumed = Trainer.resume(small_corpus,
                             tmp_path / "full" / "checkpoint_000003.ckpt",
                             tmp_path / "resumed")
    metrics = None
    for _ in range(3):
        metrics = resumed.train_step()
    assert metrics == full


def test_nan_injection_raises(small_corpus, tmp_path):
    cfg = _tiny_train_config(steps=4, nan_injection_step=2)
    trainer = Trainer(small_corpus, cfg, tmp_path)
    with pytest.raises(NonFiniteLoss):
        trainer.train()


def test_trainer_without_discriminators(small_corpus, tmp_path):
    cfg = _tiny_train_config(use_discriminators=False)
    metrics = Trainer(small_corpus, cfg, tmp_path).train()
    assert "disc" not in metrics or metrics["disc"] == 0.0


def test_trainer_masked_curriculum(small_corpus, tmp_path):
    cfg = _tiny_train_config(curriculum_masked_ratio=1.0)
    trainer = Trainer(small_corpus, cfg, tmp_path)
    batch = trainer._batch(np.random.default_rng(0))
    assert all(el["mask"] is not None for el in batch)
    cfg0 = _tiny_train_config(curriculum_masked_ratio=0.0)
    trainer0 = Trainer(small_corpus, cfg0, tmp_path)
    batch0 = trainer0._batch(np.random.default_rng(0))
    assert all(el["mask"] is None for el in batch0)


def test_classifier_refresh_gating(small_corpus, tmp_path):
    trainer = Trainer(small_corpus, _tiny_train_config(), tmp_path / "on")
    assert trainer._clf_buffer.maxlen == \
        trainer.config.classifier_buffer_steps
    trainer.train_step()
    trainer.train_step()
    assert len(trainer._clf_buffer) == 2

    off = Trainer(small_corpus,
                  _tiny_train_config(classifier_refresh_steps=0),
                  tmp_path / "off")
    off.train_step()
    assert len(off._clf_buffer) == 0

    no_spk = Trainer(small_corpus, _tiny_train_config(lambda_spk=0.0),
                     tmp_path / "no_spk")
    no_spk.train_step()
    assert len(no_spk._clf_buffer) == 0

import json

import numpy as np
import pytest

from speakstyle import datamodel as dm
from speakstyle.cli import main


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    code = main(["generate-data", "--seed", "3", "--out", str(out),
                 "--identities", "3", "--samples", "1", "--frames", "96"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def quick_run(corpus_dir, tmp_path_factory):
    """A deliberately short training run for plumbing tests."""
    base = tmp_path_factory.mktemp("cli_run")
    config = base / "config.json"
    config.write_text(json.dumps({
        "seed": 0, "steps": 4, "batch_size": 3, "adv_warmup": 2,
        "log_every": 2,
        "model": {"model_dim": 32, "style_dim": 16, "encoder_layers": 1,
                  "decoder_layers": 1, "heads": 2, "num_identities": 3},
    }))
    out = base / "run"
    code = main(["train", "--config", str(config),
                 "--data", str(corpus_dir / "manifest.jsonl"),
                 "--out", str(out), "--quiet"])
    assert code == 0
    return out


def test_generate_data_counts(corpus_dir):
    lines = (corpus_dir / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 3 * 6 * 1


def test_generate_data_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        assert main(["generate-data", "--seed", "9", "--out", str(out),
                     "--identities", "2", "--samples", "1",
                     "--frames", "48"]) == 0
    assert (a / "manifest.jsonl").read_bytes() == \
        (b / "manifest.jsonl").read_bytes()
    assert (a / "sample_0000.expr.csv").read_bytes() == \
        (b / "sample_0000.expr.csv").read_bytes()
    assert (a / "sample_0000.speech.bin").read_bytes() == \
        (b / "sample_0000.speech.bin").read_bytes()


def test_generate_data_rejects_single_identity(tmp_path, capsys):
    code = main(["generate-data", "--seed", "0", "--out",
                 str(tmp_path / "x"), "--identities", "1"])
    assert code == 2
    assert "identities" in capsys.readouterr().err


def test_train_log_is_json(quick_run):
    lines = (quick_run / "train_log.jsonl").read_text().splitlines()
    assert lines
    for line in lines:
        parsed = json.loads(line)
        for key in ("step", "total", "rec", "vel", "spk", "dur", "pho"):
            assert key in parsed


def test_train_nan_injection_exits_5(corpus_dir, tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "seed": 0, "steps": 4, "batch_size": 2, "nan_injection_step": 1,
        "model": {"model_dim": 32, "style_dim": 16, "encoder_layers": 1,
                  "decoder_layers": 1, "heads": 2, "num_identities": 3},
    }))
    code = main(["train", "--config", str(config),
                 "--data", str(corpus_dir / "manifest.jsonl"),
                 "--out", str(tmp_path / "run"), "--quiet"])
    assert code == 5
    assert "rec" in capsys.readouterr().err


def test_train_bad_config_exits_2(corpus_dir, tmp_path):
    config = tmp_path / "config.json"
    config.write_text("{broken")
    assert main(["train", "--config", str(config),
                 "--data", str(corpus_dir / "manifest.jsonl"),
                 "--out", str(tmp_path / "run")]) == 2


def test_train_missing_manifest_exits_4(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"steps": 2}))
    assert main(["train", "--config", str(config),
                 "--data", str(tmp_path / "absent.jsonl"),
                 "--out", str(tmp_path / "run")]) == 4


def test_extract_style_file_format(quick_run, corpus_dir, tmp_path):
    out = tmp_path / "style.bin"
    code = main(["extract-style",
                 "--checkpoint", str(quick_run / "checkpoint_final.ckpt"),
                 "--ref", str(corpus_dir / "sample_0000.expr.csv"),
                 "--out", str(out)])
    assert code == 0
    vec = dm.load_style_vector(out)
    assert vec.shape == (16,)
    assert out.stat().st_size == 4 + 16 * 4


def test_synthesize_with_style_vector(quick_run, corpus_dir, tmp_path):
    style = tmp_path / "style.bin"
    assert main(["extract-style",
                 "--checkpoint", str(quick_run / "checkpoint_final.ckpt"),
                 "--ref", str(corpus_dir / "sample_0000.expr.csv"),
                 "--out", str(style)]) == 0
    out = tmp_path / "synth.csv"
    code = main(["synthesize",
                 "--checkpoint", str(quick_run / "checkpoint_final.ckpt"),
                 "--speech", str(corpus_dir / "sample_0001.speech.bin"),
                 "--style-file", str(style), "--out", str(out)])
    assert code == 0
    seq = dm.load_blendweights(out)
    assert seq.frames.shape[1] == 41
    assert seq.frames.min() >= 0.0 and seq.frames.max() <= 1.0
    sidecar = json.loads((tmp_path / "synth.csv.json").read_text())
    assert sidecar["frames"] == seq.frames.shape[0]


def test_synthesize_deterministic(quick_run, corpus_dir, tmp_path):
    outs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        assert main(["synthesize",
                     "--checkpoint", str(quick_run / "checkpoint_final.ckpt"),
                     "--speech", str(corpus_dir / "sample_0001.speech.bin"),
                     "--style-ref", str(corpus_dir / "sample_0000.expr.csv"),
                     "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_synthesize_missing_checkpoint_exits_4(corpus_dir, tmp_path):
    assert main(["synthesize", "--checkpoint", str(tmp_path / "no.ckpt"),
                 "--speech", str(corpus_dir / "sample_0001.speech.bin"),
                 "--style-ref", str(corpus_dir / "sample_0000.expr.csv"),
                 "--out", str(tmp_path / "x.csv")]) == 4


def test_synthesize_without_style_exits_2(quick_run, corpus_dir, tmp_path):
    assert main(["synthesize",
                 "--checkpoint", str(quick_run / "checkpoint_final.ckpt"),
                 "--speech", str(corpus_dir / "sample_0001.speech.bin"),
                 "--out", str(tmp_path / "x.csv")]) == 2


def test_synthesize_bad_schedule_exits_2(quick_run, corpus_dir, tmp_path):
    assert main(["synthesize",
                 "--checkpoint", str(quick_run / "checkpoint_final.ckpt"),
                 "--speech", str(corpus_dir / "sample_0001.speech.bin"),
                 "--style-ref", str(corpus_dir / "sample_0000.expr.csv"),
                 "--emotions", "0:missing_label",
                 "--out", str(tmp_path / "x.csv")]) == 2


def test_synthesize_wrong_feature_dim_exits_6(quick_run, tmp_path, rng):
    speech = tmp_path / "narrow.bin"
    dm.save_speech_features(dm.SpeechFeatureSequence(
        rng.standard_normal((192, 32)).astype(np.float32)), speech)
    style = rng.random(16).astype(np.float32)
    style_path = tmp_path / "style.bin"
    dm.save_style_vector(style, style_path)
    assert main(["synthesize",
                 "--checkpoint", str(quick_run / "checkpoint_final.ckpt"),
                 "--speech", str(speech),
                 "--style-file", str(style_path),
                 "--out", str(tmp_path / "x.csv")]) == 6


def test_evaluate_self_test_gives_zero_lve(corpus_dir, capsys):
    code = main(["evaluate", "--data", str(corpus_dir / "manifest.jsonl"),
                 "--self-test"])
    assert code == 0
    metrics = json.loads(capsys.readouterr().out.strip())
    assert metrics["lve"] == pytest.approx(0.0, abs=1e-9)
    assert metrics["fid"] == pytest.approx(0.0, abs=1e-6)


def test_evaluate_missing_checkpoint_exits_4(corpus_dir):
    assert main(["evaluate", "--checkpoint", "/nonexistent/model.ckpt",
                 "--data", str(corpus_dir / "manifest.jsonl")]) == 4


def test_evaluate_reports_metrics(quick_run, corpus_dir, capsys):
    code = main(["evaluate",
                 "--checkpoint", str(quick_run / "checkpoint_final.ckpt"),
                 "--data", str(corpus_dir / "manifest.jsonl")])
    assert code == 0
    metrics = json.loads(capsys.readouterr().out.strip())
    assert "lve" in metrics and "fid" in metrics
    assert np.isfinite(metrics["lve"])

import math

import numpy as np
import pytest
import torch

from speakstyle import duration as dur
from speakstyle.errors import (DurationSumMismatch, EmptyDuration,
                               LengthMismatch, ShapeMismatch)


def test_downsample_oracle():
    """Rows [1..5] with durations [2, 3] average to [1.5, 4.0]."""
    h = torch.arange(1.0, 6.0).reshape(5, 1)
    out = dur.downsample_by_duration(h, [2, 3])
    np.testing.assert_allclose(out.numpy().ravel(), [1.5, 4.0], atol=1e-7)


def test_downsample_sum_mismatch():
    with pytest.raises(DurationSumMismatch):
        dur.downsample_by_duration(torch.zeros(5, 2), [2, 2])
    with pytest.raises(EmptyDuration):
        dur.downsample_by_duration(torch.zeros(5, 2), [])
    with pytest.raises(EmptyDuration):
        dur.downsample_by_duration(torch.zeros(5, 2), [5, 0])


def test_upsample_repeats_rows():
    h = torch.tensor([[1.0, 10.0], [2.0, 20.0]])
    out = dur.upsample_by_duration(h, [1, 3])
    np.testing.assert_allclose(
        out.numpy(), [[1, 10], [2, 20], [2, 20], [2, 20]], atol=1e-7)
    with pytest.raises(LengthMismatch):
        dur.upsample_by_duration(h, [1, 2, 3])


def test_piecewise_constant_roundtrip(rng):
    """Downsampling a sequence that is constant within each run and
    re-expanding it restores the input exactly."""
    for _ in range(25):
        m = rng.integers(2, 9)
        durations = rng.integers(1, 6, size=m)
        values = torch.tensor(rng.standard_normal((m, 3)), dtype=torch.float64)
        frames = dur.upsample_by_duration(values, durations)
        back = dur.downsample_by_duration(frames, durations)
        np.testing.assert_allclose(back.numpy(), values.numpy(), atol=1e-12)


def test_downsample_preserves_mean(rng):
    for _ in range(25):
        m = rng.integers(2, 9)
        durations = rng.integers(1, 6, size=m)
        total = int(durations.sum())
        h = torch.tensor(rng.standard_normal((total, 4)))
        pooled = dur.downsample_by_duration(h, durations)
        w = torch.tensor(durations, dtype=pooled.dtype)
        weighted = (pooled * w[:, None]).sum(dim=0) / w.sum()
        np.testing.assert_allclose(weighted.numpy(),
                                   h.mean(dim=0).numpy(), atol=1e-10)


def test_rate_convert_oracles():
    np.testing.assert_array_equal(dur.rate_convert([4, 8]), [1, 2])
    # sum 8 -> target 2, but the one-frame floor wins: 3 frames out
    np.testing.assert_array_equal(dur.rate_convert([2, 2, 4]), [1, 1, 1])
    np.testing.assert_array_equal(dur.rate_convert([192]), [48])


def test_rate_convert_explicit_total():
    out = dur.rate_convert([8, 8, 8], total=7)
    assert out.sum() == 7
    assert out.min() >= 1
    out = dur.rate_convert([8, 8, 8], total=5)
    assert out.sum() == 5


def test_rate_convert_partition_properties(rng):
    """Sum preservation (unless the floor bites), minimum one frame, and
    monotone alignment over random vectors."""
    for _ in range(300):
        m = int(rng.integers(1, 20))
        d = rng.integers(1, 25, size=m)
        out = dur.rate_convert(d)
        assert out.min() >= 1
        assert len(out) == m
        target = (int(d.sum()) + 2) // 4
        if target >= m:
            assert out.sum() == target
        else:
            assert out.sum() == m  # every run keeps one frame


def test_duration_position_embedding_structure():
    d = [2, 3]
    pe = dur.duration_position_embedding(d, 8)
    assert pe.shape == (5, 8)
    from speakstyle.nn import sinusoidal_pe
    onset = sinusoidal_pe(torch.tensor([0.0, 0.0, 2.0, 2.0, 2.0]), 4)
    intra = sinusoidal_pe(torch.tensor([0.0, 1.0, 0.0, 1.0, 2.0]), 4)
    np.testing.assert_allclose(pe[:, :4].numpy(), onset.numpy(), atol=1e-6)
    np.testing.assert_allclose(pe[:, 4:].numpy(), intra.numpy(), atol=1e-6)
    with pytest.raises(ShapeMismatch):
        dur.duration_position_embedding(d, 6)  # needs dim % 4 == 0


def test_loss_dur_oracle():
    pred = torch.tensor([3.0, 5.0])
    target = torch.tensor([1, 9])
    assert dur.loss_dur(pred, target).item() == pytest.approx(3.0, abs=1e-7)
    with pytest.raises(LengthMismatch):
        dur.loss_dur(pred, torch.tensor([1, 2, 3]))


def test_loss_pho_uniform_oracle():
    logits = torch.zeros(10, 44)
    labels = torch.arange(10) % 44
    assert dur.loss_pho(logits, labels).item() == pytest.approx(
        math.log(44), abs=1e-5)
    with pytest.raises(LengthMismatch):
        dur.loss_pho(logits, torch.zeros(9, dtype=torch.long))


def test_duration_predictor_positive():
    torch.manual_seed(0)
    pred = dur.DurationPredictor(16).eval()
    h = torch.randn(6, 16) * 5
    d = pred(h)
    assert d.shape == (6,)
    assert (d >= 1.0).all()
    batched = pred(torch.randn(2, 6, 16))
    assert batched.shape == (2, 6)
    assert (batched >= 1.0).all()


def test_round_durations():
    out = dur.round_durations(torch.tensor([0.2, 1.5, 2.49, 2.51]))
    # rint rounds half to even; everything is floored at one frame
    np.testing.assert_array_equal(out, [1, 2, 2, 3])
    assert out.dtype == np.int64


def test_predicted_runs():
    logits = torch.full((6, 44), -10.0)
    for t, p in enumerate([3, 3, 7, 7, 7, 3]):
        logits[t, p] = 10.0
    phonemes, durations = dur.predicted_runs(logits)
    np.testing.assert_array_equal(phonemes, [3, 7, 3])
    np.testing.assert_array_equal(durations, [2, 3, 1])


def test_uniform_pool():
    h = torch.arange(8.0).reshape(8, 1)
    out = dur.uniform_pool(h, 4)
    np.testing.assert_allclose(out.numpy().ravel(), [1.5, 5.5], atol=1e-7)
    with pytest.raises(LengthMismatch):
        dur.uniform_pool(torch.zeros(7, 1), 4)


def test_duration_model_teacher_forced():
    torch.manual_seed(0)
    model = dur.DurationModel(16).eval()
    h = torch.randn(20, 16)
    out, aux = model.teacher_forced(h, [8, 12])
    assert out.shape == (5, 16)  # (8+12+2)//4 expression frames
    assert aux["phoneme_logits"].shape == (20, 44)
    assert aux["predicted_durations"].shape == (2,)
    np.testing.assert_array_equal(aux["durations_expr"], [2, 3])


def test_duration_model_predicted_path():
    torch.manual_seed(0)
    model = dur.DurationModel(16, refine_durations=False).eval()
    h = torch.randn(16, 16)
    out, aux = model.predicted(h)
    assert out.shape[1] == 16
    assert out.shape[0] == int(np.sum(aux["durations_expr"]))
    assert int(np.sum(aux["durations_speech"])) == 16


def test_duration_model_uniform_path():
    torch.manual_seed(0)
    model = dur.DurationModel(16).eval()
    h = torch.randn(16, 16)
    out, aux = model.uniform(h)
    assert out.shape == (4, 16)
    assert aux == {}

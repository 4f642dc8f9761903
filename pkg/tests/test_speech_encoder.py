import pytest
import torch

from speakstyle.errors import DimensionMismatch
from speakstyle.speech_encoder import SpeechEncoder


@pytest.fixture()
def encoder():
    torch.manual_seed(0)
    return SpeechEncoder(feature_dim=24, model_dim=32, style_dim=16,
                         layers=2, heads=2).eval()


def test_output_shape(encoder):
    x = torch.randn(100, 24)
    h = encoder(x, torch.randn(16))
    assert h.shape == (100, 32)


def test_style_optional(encoder):
    x = torch.randn(50, 24)
    h = encoder(x, None)
    assert h.shape == (50, 32)


def test_zero_init_adapters_ignore_style(encoder):
    """At initialisation the style pathway is inert, so conditioning on any
    style reproduces the unconditioned output bitwise."""
    x = torch.randn(60, 24)
    a = encoder(x, torch.randn(16))
    b = encoder(x, None)
    assert torch.equal(a, b)


def test_wrong_feature_dim(encoder):
    with pytest.raises(DimensionMismatch):
        encoder(torch.randn(50, 23), None)


def test_position_embedding_breaks_time_shift_invariance(encoder):
    """A repeated frame pattern maps to different outputs at different
    positions, which only happens if positions are injected."""
    frame = torch.randn(1, 24)
    x = frame.repeat(20, 1)
    h = encoder(x, None)
    assert not torch.allclose(h[0], h[10], atol=1e-4)


def test_batched_matches_single(encoder):
    x = torch.randn(2, 40, 24)
    style = torch.randn(2, 16)
    hb = encoder(x, style)
    hs = torch.stack([encoder(x[0], style[0]), encoder(x[1], style[1])])
    assert torch.allclose(hb, hs, atol=1e-5)

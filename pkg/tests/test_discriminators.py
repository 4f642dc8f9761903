import math

import numpy as np
import pytest
import torch

from speakstyle.discriminators import (StyleDiscriminator, SyncDiscriminator,
                                       lsgan_disc_loss, lsgan_gen_loss)
from speakstyle.errors import (LengthMismatch, UnknownIdentity,
                               WindowTooShort)


def test_lsgan_oracles():
    """Scores of 0.5 everywhere give disc 0.25 and gen 0.125."""
    half = torch.full((6,), 0.5)
    assert lsgan_disc_loss(half, half).item() == pytest.approx(0.25,
                                                               abs=1e-7)
    assert lsgan_gen_loss(half).item() == pytest.approx(0.125, abs=1e-7)


def test_lsgan_optimum():
    real = torch.ones(4)
    fake = torch.zeros(4)
    assert lsgan_disc_loss(real, fake).item() == pytest.approx(0.0, abs=1e-7)
    assert lsgan_gen_loss(torch.ones(4)).item() == pytest.approx(0.0,
                                                                 abs=1e-7)


def test_lsgan_random_oracle(rng):
    for _ in range(20):
        r = torch.tensor(rng.standard_normal(5))
        f = torch.tensor(rng.standard_normal(7))
        expected_d = 0.5 * ((r - 1) ** 2).mean() + 0.5 * (f ** 2).mean()
        expected_g = 0.5 * ((f - 1) ** 2).mean()
        assert lsgan_disc_loss(r, f).item() == pytest.approx(
            expected_d.item(), rel=1e-9)
        assert lsgan_gen_loss(f).item() == pytest.approx(
            expected_g.item(), rel=1e-9)


@pytest.fixture()
def style_disc():
    torch.manual_seed(0)
    return StyleDiscriminator(num_identities=4, model_dim=32, embed_dim=16,
                              heads=2).eval()


def test_style_disc_embed(style_disc):
    e = style_disc.embed(torch.rand(48, 41))
    assert e.shape == (16,)
    batch = style_disc.embed(torch.rand(3, 48, 41))
    assert batch.shape == (3, 16)
    with pytest.raises(WindowTooShort):
        style_disc.embed(torch.rand(4, 41))


def test_prototype_realness_oracle(style_disc):
    """Realness is the dot product with the identity's own prototype."""
    with torch.no_grad():
        style_disc.prototypes.copy_(torch.eye(4, 16))
    e = torch.zeros(16)
    e[2] = 3.0
    assert style_disc.realness(e, torch.tensor(2)).item() == pytest.approx(
        3.0, abs=1e-6)
    assert style_disc.realness(e, torch.tensor(0)).item() == pytest.approx(
        0.0, abs=1e-6)
    logits = style_disc.prototype_logits(e).detach()
    np.testing.assert_allclose(logits.numpy(), [0, 0, 3, 0], atol=1e-6)


def test_loss_cls_uniform(style_disc):
    with torch.no_grad():
        style_disc.prototypes.zero_()
    e = torch.randn(5, 16)
    ids = torch.tensor([0, 1, 2, 3, 1])
    assert style_disc.loss_cls(e, ids).item() == pytest.approx(math.log(4),
                                                               abs=1e-6)


def test_unknown_identity(style_disc):
    e = torch.randn(16)
    with pytest.raises(UnknownIdentity):
        style_disc.realness(e, torch.tensor(4))
    with pytest.raises(UnknownIdentity):
        style_disc.loss_cls(e.unsqueeze(0), torch.tensor([-1]))


@pytest.fixture()
def sync_disc():
    torch.manual_seed(0)
    return SyncDiscriminator(speech_dim=24, model_dim=16).eval()


def test_sync_shapes(sync_disc):
    frames, mean = sync_disc(torch.rand(48, 41), torch.randn(192, 24))
    assert frames.shape == (48,)
    assert mean.shape == ()
    assert mean.item() == pytest.approx(frames.mean().item(), abs=1e-6)


def test_sync_rate_check(sync_disc):
    with pytest.raises(LengthMismatch):
        sync_disc(torch.rand(48, 41), torch.randn(191, 24))


def test_sync_pooling_is_blockwise(sync_disc):
    """Averaging each 4-frame speech block by hand reproduces the scores."""
    expr = torch.rand(12, 41)
    speech = torch.randn(48, 24)
    frames, _ = sync_disc(expr, speech)
    pooled = speech.reshape(12, 4, 24).mean(dim=1)
    h = torch.nn.functional.leaky_relu(
        sync_disc.expr_proj(expr) + sync_disc.speech_proj(pooled), 0.2)
    h = sync_disc.trunk(h)
    expected = sync_disc.head(h).squeeze(-1)
    assert torch.allclose(frames, expected, atol=1e-6)

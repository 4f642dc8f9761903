"""Adversaries: prototype-based style discriminator and frame-level
speech-expression sync discriminator, with least-squares GAN objectives.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import NUM_BLENDWEIGHTS, RATE_RATIO
from .errors import LengthMismatch, UnknownIdentity, WindowTooShort
from .expression_encoder import MIN_ENCODER_FRAMES
from .nn import (AdaptiveTransformerLayer, CausalConvBlock, LEAKY_SLOPE,
                 sinusoidal_pe)


def lsgan_disc_loss(real_scores: torch.Tensor,
                    fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares discriminator objective: real toward 1, fake toward 0."""
    return 0.5 * torch.mean((real_scores - 1.0) ** 2) \
        + 0.5 * torch.mean(fake_scores ** 2)


def lsgan_gen_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares generator objective: fake toward 1."""
    return 0.5 * torch.mean((fake_scores - 1.0) ** 2)


class StyleDiscriminator(nn.Module):
    """Embeds a blendweight window and scores it against learned per-identity
    style prototypes.  Realness is the dot product with the target identity's
    prototype; the classification loss is a softmax over all prototype logits.
    """

    def __init__(self, num_identities: int, input_dim: int = NUM_BLENDWEIGHTS,
                 model_dim: int = 128, embed_dim: int = 64, layers: int = 2,
                 heads: int = 4, dropout: float = 0.1):
        super().__init__()
        self.num_identities = num_identities
        self.model_dim = model_dim
        self.front = CausalConvBlock(input_dim)
        self.proj = nn.Linear(input_dim, model_dim)
        self.layers = nn.ModuleList(
            AdaptiveTransformerLayer(model_dim, heads, style_dim=1,
                                     dropout=dropout)
            for _ in range(layers))
        self.out = nn.Linear(model_dim, embed_dim)
        self.prototypes = nn.Parameter(
            0.1 * torch.randn(num_identities, embed_dim))

    def embed(self, window: torch.Tensor) -> torch.Tensor:
        frames = window.shape[-2]
        if frames < MIN_ENCODER_FRAMES:
            raise WindowTooShort(
                f"style discriminator needs at least {MIN_ENCODER_FRAMES} "
                f"frames, got {frames}")
        h = self.proj(self.front(window))
        pe = sinusoidal_pe(torch.arange(frames), self.model_dim,
                           dtype=h.dtype, device=h.device)
        h = h + pe
        for layer in self.layers:
            h = layer(h)
        return self.out(h.mean(dim=-2))

    def prototype_logits(self, embedding: torch.Tensor) -> torch.Tensor:
        return embedding @ self.prototypes.t()

    def _check_identity(self, identity: torch.Tensor) -> torch.Tensor:
        identity = torch.as_tensor(identity, dtype=torch.long,
                                   device=self.prototypes.device)
        if identity.numel() and not bool(
                ((identity >= 0) & (identity < self.num_identities)).all()):
            raise UnknownIdentity(
                f"identity out of range [0, {self.num_identities})")
        return identity

    def realness(self, embedding: torch.Tensor,
                 identity: torch.Tensor) -> torch.Tensor:
        """Dot product of the window embedding with its identity's prototype."""
        identity = self._check_identity(identity)
        protos = self.prototypes[identity]
        return (embedding * protos).sum(dim=-1)

    def loss_cls(self, embedding: torch.Tensor,
                 identity: torch.Tensor) -> torch.Tensor:
        identity = self._check_identity(identity)
        logits = self.prototype_logits(embedding)
        if logits.dim() == 1:
            logits = logits.unsqueeze(0)
            identity = identity.reshape(1)
        return F.cross_entropy(logits, identity)


class SyncDiscriminator(nn.Module):
    """Scores speech-expression alignment per expression frame.

    Speech hiddens come in at 4x the expression rate and are mean-pooled to
    25 fps before fusion; the final score is the mean of the frame scores.
    """

    def __init__(self, speech_dim: int = 128, input_dim: int = NUM_BLENDWEIGHTS,
                 model_dim: int = 64):
        super().__init__()
        self.expr_proj = nn.Linear(input_dim, model_dim)
        self.speech_proj = nn.Linear(speech_dim, model_dim)
        self.trunk = CausalConvBlock(model_dim)
        self.head = nn.Linear(model_dim, 1)

    def forward(self, window: torch.Tensor,
                speech_hidden: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        frames = window.shape[0]
        if speech_hidden.shape[0] != RATE_RATIO * frames:
            raise LengthMismatch(
                f"{speech_hidden.shape[0]} speech frames for {frames} "
                f"expression frames; expected ratio {RATE_RATIO}")
        pooled = speech_hidden.reshape(frames, RATE_RATIO,
                                       speech_hidden.shape[1]).mean(dim=1)
        h = F.leaky_relu(self.expr_proj(window) + self.speech_proj(pooled),
                         LEAKY_SLOPE)
        h = self.trunk(h)
        frame_scores = self.head(h).squeeze(-1)
        return frame_scores, frame_scores.mean()

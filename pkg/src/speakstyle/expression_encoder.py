"""Twin expression encoders: global style vector and per-frame content codes.

Both encoders share the same architecture (causal conv front, one
self-attention block); the style branch mean-pools over time, the content
branch keeps per-frame codes.  A single identity classifier serves both the
style supervision loss and, through gradient reversal, the adversarial
penalty that strips identity from the content codes.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import WindowTooShort
from .nn import LEAKY_SLOPE, MultiHeadAttention, grl

MIN_ENCODER_FRAMES = 8


def standardize_codes(pooled: torch.Tensor) -> torch.Tensor:
    """Standardize a batch of pooled codes per dimension.

    The content trunk can dodge the adversary by translating or inflating
    the whole batch: the classifier then chases a moving offset and reads
    chance while the per-identity geometry stays intact.  Removing batch
    mean and scale closes both escapes, and any affine-equivariant probe
    that the standardized adversary beats is beaten on the raw codes too.
    Single vectors pass through untouched; there is no batch to normalize.
    """
    if pooled.dim() == 2 and pooled.shape[0] > 1:
        return (pooled - pooled.mean(dim=0, keepdim=True)) \
            / (pooled.std(dim=0, keepdim=True) + 1e-5)
    return pooled


class _EncoderTrunk(nn.Module):
    """Conv front (kernel 3, causal) into a residual self-attention block."""

    def __init__(self, input_dim: int, model_dim: int, out_dim: int,
                 heads: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv1d(input_dim, model_dim, 3)
        self.conv2 = nn.Conv1d(model_dim, model_dim, 3)
        self.attn = MultiHeadAttention(model_dim, heads, dropout)
        self.norm = nn.LayerNorm(model_dim)
        self.proj = nn.Linear(model_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        h = x.transpose(1, 2)
        h = F.leaky_relu(self.conv1(F.pad(h, (2, 0))), LEAKY_SLOPE)
        h = F.leaky_relu(self.conv2(F.pad(h, (2, 0))), LEAKY_SLOPE)
        h = h.transpose(1, 2)
        h = self.norm(h + self.attn(h, h, h))
        h = self.proj(h)
        return h.squeeze(0) if squeeze else h


class IdentityClassifier(nn.Module):
    """Two linear layers with a ReLU and dropout on the hidden activation.

    Dropout stays off the logits: logit dropout would inject
    feature-uncorrelated gradient noise into the reversed branch and
    stall the disentanglement game.
    """

    def __init__(self, in_dim: int, num_identities: int, dropout: float = 0.1):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, in_dim)
        self.fc2 = nn.Linear(in_dim, num_identities)
        self.drop = nn.Dropout(dropout)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.drop(F.relu(self.fc1(v))))


class ExpressionEncoder(nn.Module):
    def __init__(self, input_dim: int = 41, model_dim: int = 128,
                 style_dim: int = 64, heads: int = 4, num_identities: int = 4,
                 dropout: float = 0.1, grl_lambda: float = 1.0):
        super().__init__()
        self.style_dim = style_dim
        self.num_identities = num_identities
        self.grl_lambda = grl_lambda
        self.style_trunk = _EncoderTrunk(input_dim, model_dim, style_dim,
                                         heads, dropout)
        self.content_trunk = _EncoderTrunk(input_dim, model_dim, style_dim,
                                           heads, dropout)
        self.classifier = IdentityClassifier(style_dim, num_identities, dropout)

    @staticmethod
    def _check_length(y: torch.Tensor) -> None:
        frames = y.shape[-2]
        if frames < MIN_ENCODER_FRAMES:
            raise WindowTooShort(
                f"encoder needs at least {MIN_ENCODER_FRAMES} frames, "
                f"got {frames}")

    def encode_style(self, y: torch.Tensor) -> torch.Tensor:
        """Pool a blendweight window into a single style vector."""
        self._check_length(y)
        return self.style_trunk(y).mean(dim=-2)

    def encode_content(self, y: torch.Tensor) -> torch.Tensor:
        """Per-frame content codes, same length as the input window."""
        self._check_length(y)
        return self.content_trunk(y)

    def classify_identity(self, v: torch.Tensor) -> torch.Tensor:
        return self.classifier(v)

    def loss_spk(self, logits: torch.Tensor,
                 identity: torch.Tensor) -> torch.Tensor:
        """Batch-mean cross-entropy of identity logits."""
        if logits.dim() == 1:
            logits = logits.unsqueeze(0)
            identity = identity.reshape(1)
        return F.cross_entropy(logits, identity)

    def adversarial_content_penalty(self, content: torch.Tensor,
                                    identity: torch.Tensor,
                                    lam: float | None = None) -> torch.Tensor:
        """Identity loss on pooled content, gradient-reversed into the encoder.

        The forward value equals loss_spk on the standardized pooled codes;
        the backward pass pushes the content trunk away from
        identity-predictive features while still training the classifier
        itself.
        """
        pooled = standardize_codes(content.mean(dim=-2))
        reversed_pooled = grl(pooled, self.grl_lambda if lam is None else lam)
        logits = self.classify_identity(reversed_pooled)
        return self.loss_spk(logits, identity)

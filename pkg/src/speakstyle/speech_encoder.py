"""Speech-feature encoder: style-adaptive transformer over 100 fps features."""

from __future__ import annotations

import torch
from torch import nn

from .errors import DimensionMismatch
from .nn import (AdaptiveTransformerLayer, CausalConvBlock, sinusoidal_pe)


class SpeechEncoder(nn.Module):
    """Causal conv front end, projection with sinusoidal positions, then
    style-adaptive transformer layers.  Output length equals input length.
    """

    def __init__(self, feature_dim: int, model_dim: int = 128,
                 style_dim: int = 64, layers: int = 4, heads: int = 4,
                 ff_mult: int = 2, dropout: float = 0.1):
        super().__init__()
        self.feature_dim = feature_dim
        self.model_dim = model_dim
        self.front = CausalConvBlock(feature_dim)
        self.proj = nn.Linear(feature_dim, model_dim)
        self.layers = nn.ModuleList(
            AdaptiveTransformerLayer(model_dim, heads, style_dim, ff_mult,
                                     dropout)
            for _ in range(layers))

    def forward(self, x: torch.Tensor,
                style: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.feature_dim:
            raise DimensionMismatch(
                f"speech features have dim {x.shape[-1]}, "
                f"encoder expects {self.feature_dim}")
        h = self.proj(self.front(x))
        frames = h.shape[-2]
        pe = sinusoidal_pe(torch.arange(frames), self.model_dim,
                           dtype=h.dtype, device=h.device)
        h = h + pe
        for layer in self.layers:
            h = layer(h, style=style)
        return h

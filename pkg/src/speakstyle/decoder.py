"""Expression decoder: style-adaptive transformer with learned relative
position attention and masked transition in-betweening.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .datamodel import NUM_BLENDWEIGHTS
from .errors import InvalidMaskSpec, MaskWithoutContext, ShapeMismatch
from .nn import (AdaptiveTransformerLayer, CausalConvBlock, sinusoidal_pe)

RELATIVE_RADIUS = 32


class RelativePositionBias(nn.Module):
    """Learned additive attention logits indexed by clipped key-query offset.

    Zero-initialized so that at init the attention is exactly the standard
    scaled dot product.
    """

    def __init__(self, heads: int, radius: int = RELATIVE_RADIUS):
        super().__init__()
        self.radius = radius
        self.table = nn.Parameter(torch.zeros(heads, 2 * radius + 1))

    def forward(self, frames: int) -> torch.Tensor:
        pos = torch.arange(frames, device=self.table.device)
        offsets = pos[None, :] - pos[:, None]
        index = torch.clamp(offsets, -self.radius, self.radius) + self.radius
        return self.table[:, index]


@dataclass(frozen=True)
class TransitionMask:
    """Window partition for in-betweening: known context, one known target
    frame, and the masked span to fill between them.
    """

    window_len: int
    context_len: int
    target_idx: int
    context: tuple[int, ...] = field(init=False)
    masked: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(range(self.context_len)))
        object.__setattr__(
            self, "masked",
            tuple(t for t in range(self.context_len, self.window_len)
                  if t != self.target_idx))

    @property
    def known(self) -> tuple[int, ...]:
        return self.context + (self.target_idx,)

    def keyframe_codes(self) -> np.ndarray:
        """Signed frames-remaining-until-target for every window position."""
        return self.target_idx - np.arange(self.window_len)

    def attention_mask(self) -> torch.Tensor:
        """Boolean (T, T) mask, True = blocked.  Every frame may attend the
        known frames and itself; masked frames are hidden from each other.
        """
        blocked = torch.zeros(self.window_len, self.window_len,
                              dtype=torch.bool)
        masked = torch.tensor(self.masked, dtype=torch.long)
        blocked[:, masked] = True
        blocked[masked, masked] = False
        return blocked


def build_transition_mask(window_len: int, context_len: int,
                          target_idx: int) -> TransitionMask:
    if not 0 < context_len < target_idx <= window_len - 1:
        raise InvalidMaskSpec(
            f"need 0 < context_len < target_idx <= window_len-1, got "
            f"context_len={context_len} target_idx={target_idx} "
            f"window_len={window_len}")
    return TransitionMask(window_len, context_len, target_idx)


class ExpressionDecoder(nn.Module):
    """Decode blendweight windows from the duration-aligned speech hiddens.

    With a transition mask, ground-truth context frames are projected into
    the input sequence, keyframe countdown codes are added at every layer
    input, and known frames are copied through to the output unchanged.
    """

    def __init__(self, model_dim: int = 128, style_dim: int = 64,
                 layers: int = 4, heads: int = 4, ff_mult: int = 2,
                 dropout: float = 0.1, output_dim: int = NUM_BLENDWEIGHTS,
                 radius: int = RELATIVE_RADIUS, use_relative: bool = True):
        super().__init__()
        self.model_dim = model_dim
        self.output_dim = output_dim
        self.use_relative = use_relative
        self.front = CausalConvBlock(model_dim)
        self.ctx_proj = nn.Linear(output_dim, model_dim)
        self.layers = nn.ModuleList(
            AdaptiveTransformerLayer(model_dim, heads, style_dim, ff_mult,
                                     dropout)
            for _ in range(layers))
        self.rel_bias = nn.ModuleList(
            RelativePositionBias(heads, radius) for _ in range(layers))
        self.head = nn.Linear(model_dim, output_dim)

    def forward(self, h_d: torch.Tensor, style: torch.Tensor | None = None,
                mask: TransitionMask | None = None,
                context_expressions: torch.Tensor | None = None):
        if h_d.dim() != 2 or h_d.shape[1] != self.model_dim:
            raise ShapeMismatch(
                f"decoder input must be (T, {self.model_dim}), "
                f"got {tuple(h_d.shape)}")
        frames = h_d.shape[0]
        attn_mask = None
        pe_kf = None
        known_idx = None
        if mask is not None:
            if context_expressions is None:
                raise MaskWithoutContext(
                    "transition decoding needs context expressions")
            if mask.window_len != frames:
                raise ShapeMismatch(
                    f"mask covers {mask.window_len} frames, input has {frames}")
            if context_expressions.shape != (frames, self.output_dim):
                raise ShapeMismatch(
                    f"context expressions must be ({frames}, "
                    f"{self.output_dim}), got "
                    f"{tuple(context_expressions.shape)}")
            known_idx = torch.tensor(mask.known, dtype=torch.long,
                                     device=h_d.device)
            h_d = h_d.clone()
            h_d[known_idx] = self.ctx_proj(context_expressions[known_idx])
            attn_mask = mask.attention_mask().to(h_d.device)
            pe_kf = sinusoidal_pe(mask.keyframe_codes(), self.model_dim,
                                  dtype=h_d.dtype, device=h_d.device)
        h = self.front(h_d)
        for layer, bias in zip(self.layers, self.rel_bias):
            if pe_kf is not None:
                h = h + pe_kf
            h = layer(h, style=style,
                      attn_bias=bias(frames) if self.use_relative else None,
                      attn_mask=attn_mask)
        out = torch.sigmoid(self.head(h))
        if known_idx is not None:
            out = out.clone()
            out[known_idx] = context_expressions[known_idx]
        return out

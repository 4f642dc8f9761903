"""Shared differentiable building blocks and the checkpoint archive format.

Blocks accept either (T, d) or (B, T, d) inputs; unbatched inputs come back
unbatched.  Parameter state is owned by a single training context; forward
and backward are single-threaded per batch.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import AllMaskedRow, MissingCheckpoint, ShapeMismatch

LEAKY_SLOPE = 0.2
PE_BASE = 10000.0


def sinusoidal_pe(positions, dim: int, *, dtype=torch.float32,
                  device=None) -> torch.Tensor:
    """Sin/cos interleaved position embedding with base 10000.

    ``positions`` may be a scalar int or a 1-D tensor/sequence; the result is
    (dim,) or (len, dim).  Negative positions follow the same formula, which
    the keyframe countdown codes rely on.
    """
    if dim % 2 != 0:
        raise ShapeMismatch(f"embedding dim must be even, got {dim}")
    scalar = np.isscalar(positions)
    pos = torch.as_tensor(positions, dtype=dtype, device=device).reshape(-1)
    half = torch.arange(dim // 2, dtype=dtype, device=device)
    inv_freq = torch.pow(torch.tensor(PE_BASE, dtype=dtype, device=device),
                         -2.0 * half / dim)
    angles = pos[:, None] * inv_freq[None, :]
    pe = torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1)
    pe = pe.reshape(pos.shape[0], dim)
    return pe[0] if scalar else pe


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad.neg() * ctx.lam, None


def grl(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Gradient reversal: identity forward, gradient scaled by -lam backward."""
    if lam < 0:
        raise ValueError(f"reversal strength must be >= 0, got {lam}")
    return _GradientReversal.apply(x, lam)


def _with_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() == 3:
        return x, False
    raise ShapeMismatch(f"expected (T, d) or (B, T, d), got {tuple(x.shape)}")


class CausalConvBlock(nn.Module):
    """Two causal 1-D convolutions (kernel 3) with LeakyReLU after each.

    Output frame t depends only on input frames <= t; each layer left-pads
    by kernel_size - 1.
    """

    def __init__(self, dim: int, kernel_size: int = 3):
        super().__init__()
        self.left_pad = kernel_size - 1
        self.conv1 = nn.Conv1d(dim, dim, kernel_size)
        self.conv2 = nn.Conv1d(dim, dim, kernel_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, squeeze = _with_batch(x)
        h = x.transpose(1, 2)
        h = F.leaky_relu(self.conv1(F.pad(h, (self.left_pad, 0))), LEAKY_SLOPE)
        h = F.leaky_relu(self.conv2(F.pad(h, (self.left_pad, 0))), LEAKY_SLOPE)
        h = h.transpose(1, 2)
        return h.squeeze(0) if squeeze else h


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with an optional additive logit bias.

    The bias (per head or shared) is added to Q K^T before the 1/sqrt(d_k)
    scaling; masked positions are set to -inf before the softmax.  A query
    row with every key masked raises AllMaskedRow.
    """

    def __init__(self, model_dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if model_dim % heads != 0:
            raise ShapeMismatch(
                f"model_dim {model_dim} not divisible by heads {heads}")
        self.model_dim = model_dim
        self.heads = heads
        self.head_dim = model_dim // heads
        self.w_q = nn.Linear(model_dim, model_dim)
        self.w_k = nn.Linear(model_dim, model_dim)
        self.w_v = nn.Linear(model_dim, model_dim)
        self.w_o = nn.Linear(model_dim, model_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, bias=None, mask=None,
                return_attn: bool = False):
        query, squeeze = _with_batch(query)
        key, _ = _with_batch(key)
        value, _ = _with_batch(value)
        b, t_q, _ = query.shape
        t_k = key.shape[1]

        def split(x, w):
            return w(x).view(b, -1, self.heads, self.head_dim).transpose(1, 2)

        q = split(query, self.w_q)
        k = split(key, self.w_k)
        v = split(value, self.w_v)
        scores = torch.matmul(q, k.transpose(-2, -1))
        if bias is not None:
            while bias.dim() < 4:
                bias = bias.unsqueeze(0)
            scores = scores + bias
        scores = scores / math.sqrt(self.head_dim)
        if mask is not None:
            mask = torch.as_tensor(mask, dtype=torch.bool, device=scores.device)
            if mask.dim() == 2:
                mask = mask.unsqueeze(0)
            if mask.shape[-2:] != (t_q, t_k):
                raise ShapeMismatch(
                    f"mask shape {tuple(mask.shape)} does not cover "
                    f"({t_q}, {t_k}) attention")
            if bool(mask.all(dim=-1).any()):
                raise AllMaskedRow("a query row has every key masked")
            scores = scores.masked_fill(mask.unsqueeze(1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = self.dropout(attn)
        out = torch.matmul(attn, v)
        out = out.transpose(1, 2).reshape(b, t_q, self.model_dim)
        out = self.w_o(out)
        if squeeze:
            out = out.squeeze(0)
            attn = attn.squeeze(0)
        return (out, attn) if return_attn else out


class AdaptiveLayerNorm(nn.Module):
    """Layer norm whose gain and bias are predicted from a style vector.

    Output is LN(x) * (1 + g(w)) + b(w) with g, b linear in w and broadcast
    over time.  Both heads are zero-initialized, so the block starts as (and,
    given a None style, stays) a plain layer norm.
    """

    def __init__(self, dim: int, style_dim: int, eps: float = 1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(dim, eps=eps, elementwise_affine=False)
        self.gain = nn.Linear(style_dim, dim)
        self.bias = nn.Linear(style_dim, dim)
        nn.init.zeros_(self.gain.weight)
        nn.init.zeros_(self.gain.bias)
        nn.init.zeros_(self.bias.weight)
        nn.init.zeros_(self.bias.bias)

    def forward(self, x: torch.Tensor, style: torch.Tensor | None = None):
        y = self.norm(x)
        if style is None:
            return y
        g = self.gain(style)
        b = self.bias(style)
        if x.dim() == 3 and g.dim() == 2:
            g = g.unsqueeze(1)
            b = b.unsqueeze(1)
        return y * (1.0 + g) + b


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 2, dropout: float = 0.1):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, mult * dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(mult * dim, dim),
        )

    def forward(self, x):
        return self.net(x)


class AdaptiveTransformerLayer(nn.Module):
    """Pre-norm transformer layer with style-adaptive layer normalization."""

    def __init__(self, dim: int, heads: int, style_dim: int, ff_mult: int = 2,
                 dropout: float = 0.1):
        super().__init__()
        self.attn_norm = AdaptiveLayerNorm(dim, style_dim)
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.ff_norm = AdaptiveLayerNorm(dim, style_dim)
        self.ff = FeedForward(dim, ff_mult, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, style=None, attn_bias=None, attn_mask=None):
        h = self.attn_norm(x, style)
        x = x + self.drop(self.attn(h, h, h, bias=attn_bias, mask=attn_mask))
        h = self.ff_norm(x, style)
        x = x + self.drop(self.ff(h))
        return x


# --- checkpoint archive -----------------------------------------------------
#
# Single binary file: magic, version, entry count, then per entry the
# path string, the shape, and a little-endian float32 payload.

_ARCHIVE_MAGIC = b"SSAR"
_ARCHIVE_VERSION = 1
_U32 = struct.Struct("<I")


def save_archive(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_ARCHIVE_MAGIC)
        fh.write(_U32.pack(_ARCHIVE_VERSION))
        fh.write(_U32.pack(len(arrays)))
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(data.ndim))
            for d in data.shape:
                fh.write(_U32.pack(d))
            fh.write(data.tobytes())


def load_archive(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(str(path))
    raw = path.read_bytes()
    if raw[:4] != _ARCHIVE_MAGIC:
        raise ShapeMismatch(f"{path}: not a checkpoint archive")
    offset = 4
    version, = _U32.unpack_from(raw, offset); offset += 4
    if version != _ARCHIVE_VERSION:
        raise ShapeMismatch(f"{path}: unsupported archive version {version}")
    count, = _U32.unpack_from(raw, offset); offset += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, = _U32.unpack_from(raw, offset); offset += 4
        name = raw[offset:offset + name_len].decode("utf-8"); offset += name_len
        ndim, = _U32.unpack_from(raw, offset); offset += 4
        shape = []
        for _ in range(ndim):
            d, = _U32.unpack_from(raw, offset); offset += 4
            shape.append(d)
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n,
                                     offset=offset).reshape(shape).copy()
        offset += 4 * n
    return arrays


def pack_json(obj) -> np.ndarray:
    """Encode a JSON-serializable object as a float32 byte array entry."""
    data = np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"),
                         dtype=np.uint8)
    return data.astype(np.float32)


def unpack_json(array: np.ndarray):
    return json.loads(array.astype(np.uint8).tobytes().decode("utf-8"))


def state_dict_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().astype(np.float32)
            for k, v in module.state_dict().items()}


def load_state_arrays(module: nn.Module, arrays: dict[str, np.ndarray],
                      prefix: str = "") -> None:
    state = {}
    for k, v in module.state_dict().items():
        key = prefix + k
        if key not in arrays:
            raise ShapeMismatch(f"checkpoint entry {key!r} is missing")
        stored = arrays[key]
        if tuple(stored.shape) != tuple(v.shape):
            raise ShapeMismatch(
                f"checkpoint entry {key!r} has shape {stored.shape}, "
                f"module expects {tuple(v.shape)}")
        state[k] = torch.as_tensor(stored, dtype=v.dtype)
    module.load_state_dict(state)

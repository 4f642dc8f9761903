"""Duration modeling: frame phonemes, duration-weighted pooling, and the
100 fps -> 25 fps rate bridge that builds the decoder input timeline.

The pure functions here are rate-conversion and (down/up)sampling algebra;
the two predictor heads are the only parameterized parts.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import NUM_PHONEMES, RATE_RATIO
from .errors import (DurationSumMismatch, EmptyDuration, LengthMismatch,
                     ShapeMismatch)
from .nn import sinusoidal_pe


def _duration_array(durations) -> np.ndarray:
    if isinstance(durations, torch.Tensor):
        durations = durations.detach().cpu().numpy()
    arr = np.asarray(durations, dtype=np.int64).reshape(-1)
    if arr.size == 0:
        raise EmptyDuration("duration sequence is empty")
    if arr.min() <= 0:
        raise EmptyDuration(f"durations must be positive, got min {arr.min()}")
    return arr


def downsample_by_duration(h: torch.Tensor, durations) -> torch.Tensor:
    """Average contiguous duration spans of h into one row per phoneme.

    Spans are half-open [l_i, l_i + d_i) and must tile the full sequence.
    """
    d = _duration_array(durations)
    frames = h.shape[0]
    if int(d.sum()) != frames:
        raise DurationSumMismatch(int(d.sum()), frames)
    seg = torch.from_numpy(np.repeat(np.arange(d.size), d)).to(h.device)
    sums = torch.zeros(d.size, h.shape[1], dtype=h.dtype,
                       device=h.device).index_add(0, seg, h)
    return sums / torch.from_numpy(d).to(device=h.device, dtype=h.dtype)[:, None]


def upsample_by_duration(h: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row i of h durations[i] times (length regulation)."""
    d = _duration_array(durations)
    if h.shape[0] != d.size:
        raise LengthMismatch(
            f"{h.shape[0]} hidden rows vs {d.size} durations")
    idx = torch.from_numpy(np.repeat(np.arange(d.size), d)).to(h.device)
    return h.index_select(0, idx)


def rate_convert(durations, total: int | None = None) -> np.ndarray:
    """Convert 100 fps durations to 25 fps with largest-remainder correction.

    Every output entry stays >= 1 even when the input is shorter than one
    expression frame; that floor takes precedence over hitting the target
    sum exactly.  The default target is round-half-up of sum/4.
    """
    d = _duration_array(durations)
    quotients = d / float(RATE_RATIO)
    floors = np.floor(quotients).astype(np.int64)
    out = np.maximum(floors, 1)
    if total is None:
        total = (int(d.sum()) + RATE_RATIO // 2) // RATE_RATIO
    remainders = quotients - floors
    diff = total - int(out.sum())
    if diff > 0:
        order = sorted(range(d.size), key=lambda i: (-remainders[i], i))
        pos = 0
        while diff > 0:
            out[order[pos % d.size]] += 1
            pos += 1
            diff -= 1
    elif diff < 0:
        while diff < 0:
            candidates = [i for i in range(d.size) if out[i] > 1]
            if not candidates:
                break
            take = min(candidates, key=lambda i: (remainders[i], i))
            out[take] -= 1
            diff += 1
    return out


def duration_position_embedding(durations, model_dim: int, *,
                                dtype=torch.float32,
                                device=None) -> torch.Tensor:
    """Per-frame position code: phoneme onset in one half of the embedding,
    offset within the phoneme in the other.
    """
    if model_dim % 4 != 0:
        raise ShapeMismatch(
            f"duration position embedding needs model_dim divisible by 4, "
            f"got {model_dim}")
    d = _duration_array(durations)
    onsets = np.concatenate(([0], np.cumsum(d)[:-1]))
    frame_onset = np.repeat(onsets, d)
    frame_intra = np.arange(int(d.sum())) - frame_onset
    half = model_dim // 2
    pe_onset = sinusoidal_pe(frame_onset, half, dtype=dtype, device=device)
    pe_intra = sinusoidal_pe(frame_intra, half, dtype=dtype, device=device)
    return torch.cat((pe_onset, pe_intra), dim=-1)


def build_decoder_input(h_up: torch.Tensor, pe_d: torch.Tensor) -> torch.Tensor:
    if h_up.shape != pe_d.shape:
        raise ShapeMismatch(
            f"hidden {tuple(h_up.shape)} vs position {tuple(pe_d.shape)}")
    return h_up + pe_d


def loss_pho(logits: torch.Tensor, frame_labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of per-frame phoneme logits."""
    if logits.shape[0] != frame_labels.shape[0]:
        raise LengthMismatch(
            f"{logits.shape[0]} logit rows vs {frame_labels.shape[0]} labels")
    return F.cross_entropy(logits, frame_labels.long())


def loss_dur(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute duration error in speech frames."""
    if predicted.shape != target.shape:
        raise LengthMismatch(
            f"predicted {tuple(predicted.shape)} vs "
            f"target {tuple(target.shape)}")
    return torch.mean(torch.abs(predicted - target.to(predicted.dtype)))


class PhonemePredictor(nn.Module):
    """Per-frame phoneme classifier over the speech hidden sequence."""

    def __init__(self, model_dim: int, num_phonemes: int = NUM_PHONEMES):
        super().__init__()
        self.fc1 = nn.Linear(model_dim, model_dim)
        self.fc2 = nn.Linear(model_dim, num_phonemes)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(h)))


class DurationPredictor(nn.Module):
    """Two conv blocks and a linear head emitting per-phoneme durations.

    The head predicts log-duration; the output is exponentiated and clamped
    to at least one speech frame.
    """

    def __init__(self, model_dim: int, kernel_size: int = 3,
                 dropout: float = 0.1):
        super().__init__()
        pad = (kernel_size - 1) // 2
        self.conv1 = nn.Conv1d(model_dim, model_dim, kernel_size, padding=pad)
        self.norm1 = nn.LayerNorm(model_dim)
        self.conv2 = nn.Conv1d(model_dim, model_dim, kernel_size, padding=pad)
        self.norm2 = nn.LayerNorm(model_dim)
        self.drop = nn.Dropout(dropout)
        self.head = nn.Linear(model_dim, 1)

    def forward(self, h_pho: torch.Tensor) -> torch.Tensor:
        squeeze = h_pho.dim() == 2
        h = h_pho.unsqueeze(0) if squeeze else h_pho
        h = h.transpose(1, 2)
        h = self.drop(self.norm1(F.relu(self.conv1(h)).transpose(1, 2)))
        h = h.transpose(1, 2)
        h = self.drop(self.norm2(F.relu(self.conv2(h)).transpose(1, 2)))
        log_d = self.head(h).squeeze(-1)
        d = torch.clamp(torch.exp(log_d), min=1.0)
        return d.squeeze(0) if squeeze else d


def round_durations(d_hat: torch.Tensor) -> np.ndarray:
    """Round predicted durations for inference, keeping every entry >= 1."""
    rounded = np.rint(d_hat.detach().cpu().numpy()).astype(np.int64)
    return np.maximum(rounded, 1)


def predicted_runs(logits: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Collapse per-frame argmax labels into (label, duration) runs."""
    labels = logits.argmax(dim=-1).detach().cpu().numpy()
    if labels.size == 0:
        raise EmptyDuration("no frames to segment")
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [labels.size]))
    return labels[starts], (ends - starts).astype(np.int64)


def uniform_pool(h: torch.Tensor, ratio: int = RATE_RATIO) -> torch.Tensor:
    """Plain ratio:1 mean pooling, the fallback when duration modeling is off."""
    frames = h.shape[0]
    if frames % ratio != 0:
        raise LengthMismatch(
            f"{frames} frames not divisible by pooling ratio {ratio}")
    return h.reshape(frames // ratio, ratio, h.shape[1]).mean(dim=1)


class DurationModel(nn.Module):
    """The two duration heads plus the teacher-forced / predicted pipelines.

    Training uses ground-truth phoneme spans; inference segments the
    predicted frame labels and (optionally) lets the duration predictor
    refine the run lengths.
    """

    def __init__(self, model_dim: int, num_phonemes: int = NUM_PHONEMES,
                 dropout: float = 0.1, detach_predictor_input: bool = True,
                 refine_durations: bool = True):
        super().__init__()
        self.model_dim = model_dim
        self.detach_predictor_input = detach_predictor_input
        self.refine_durations = refine_durations
        self.phoneme_predictor = PhonemePredictor(model_dim, num_phonemes)
        self.duration_predictor = DurationPredictor(model_dim, dropout=dropout)

    def predict_phonemes(self, h_w2v: torch.Tensor) -> torch.Tensor:
        return self.phoneme_predictor(h_w2v)

    def predict_durations(self, h_pho: torch.Tensor) -> torch.Tensor:
        h = h_pho.detach() if self.detach_predictor_input else h_pho
        return self.duration_predictor(h)

    def teacher_forced(self, h_w2v: torch.Tensor, durations_speech,
                       total_expr: int | None = None):
        """Build the decoder input from ground-truth durations.

        Returns (H_d, aux) where aux carries the phoneme logits, predicted
        durations, and the expression-rate duration vector.
        """
        logits = self.predict_phonemes(h_w2v)
        h_pho = downsample_by_duration(h_w2v, durations_speech)
        d_hat = self.predict_durations(h_pho)
        d_expr = rate_convert(durations_speech, total=total_expr)
        h_up = upsample_by_duration(h_pho, d_expr)
        pe_d = duration_position_embedding(d_expr, self.model_dim,
                                           dtype=h_up.dtype,
                                           device=h_up.device)
        h_d = build_decoder_input(h_up, pe_d)
        aux = {"phoneme_logits": logits, "predicted_durations": d_hat,
               "durations_expr": d_expr}
        return h_d, aux

    def predicted(self, h_w2v: torch.Tensor):
        """Build the decoder input from predicted phonemes and durations."""
        logits = self.predict_phonemes(h_w2v)
        labels, run_durations = predicted_runs(logits)
        h_pho = downsample_by_duration(h_w2v, run_durations)
        if self.refine_durations:
            d_hat = self.predict_durations(h_pho)
            durations_speech = round_durations(d_hat)
        else:
            durations_speech = run_durations
        d_expr = rate_convert(durations_speech)
        h_up = upsample_by_duration(h_pho, d_expr)
        pe_d = duration_position_embedding(d_expr, self.model_dim,
                                           dtype=h_up.dtype,
                                           device=h_up.device)
        h_d = build_decoder_input(h_up, pe_d)
        aux = {"phoneme_labels": labels, "run_durations": run_durations,
               "durations_speech": durations_speech, "durations_expr": d_expr}
        return h_d, aux

    def uniform(self, h_w2v: torch.Tensor):
        """Duration-free fallback: 4:1 mean pooling with standard positions."""
        h_down = uniform_pool(h_w2v)
        pe = sinusoidal_pe(torch.arange(h_down.shape[0]), self.model_dim,
                           dtype=h_down.dtype, device=h_down.device)
        return h_down + pe, {}

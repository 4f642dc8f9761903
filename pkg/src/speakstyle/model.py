"""Full generator assembly, checkpoint IO, and long-form synthesis."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .datamodel import (NUM_BLENDWEIGHTS, NUM_PHONEMES, RATE_RATIO,
                        WINDOW_FRAMES)
from .decoder import (ExpressionDecoder, RELATIVE_RADIUS,
                      build_transition_mask)
from .duration import (DurationModel, build_decoder_input,
                       downsample_by_duration, duration_position_embedding,
                       upsample_by_duration)
from .errors import ConfigError, ShapeMismatch, WindowTooShort
from .expression_encoder import (ExpressionEncoder, MIN_ENCODER_FRAMES)
from .nn import (load_archive, load_state_arrays, pack_json, save_archive,
                 state_dict_arrays, unpack_json)
from .speech_encoder import SpeechEncoder

TRANSITION_GAP = 16
TRANSITION_HALF_WINDOW = WINDOW_FRAMES // 2


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    model_dim: int = 128
    style_dim: int = 64
    heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 4
    ff_mult: int = 2
    dropout: float = 0.1
    num_identities: int = 4
    num_phonemes: int = NUM_PHONEMES
    grl_lambda: float = 1.0
    relative_radius: int = RELATIVE_RADIUS
    use_duration: bool = True
    use_style: bool = True
    use_relative_position: bool = True
    detach_duration_input: bool = True
    # Off by default so predicted-duration synthesis keeps the exact 4:1
    # speech-to-expression frame ratio; switching it on lets the duration
    # predictor overrule the predicted phoneme run lengths.
    refine_durations: bool = False
    transition_style_interpolation: bool = False

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads "
                f"{self.heads}")
        if self.model_dim % 4 != 0:
            raise ConfigError(
                f"model_dim must be divisible by 4 for the duration "
                f"position embedding, got {self.model_dim}")
        if self.num_identities < 2:
            raise ConfigError(
                f"need at least 2 identities, got {self.num_identities}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**data)


class SpeakStyleModel(nn.Module):
    """Expression encoder, speech encoder, duration model, and decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.expression_encoder = ExpressionEncoder(
            input_dim=NUM_BLENDWEIGHTS, model_dim=config.model_dim,
            style_dim=config.style_dim, heads=config.heads,
            num_identities=config.num_identities, dropout=config.dropout,
            grl_lambda=config.grl_lambda)
        self.speech_encoder = SpeechEncoder(
            feature_dim=config.feature_dim, model_dim=config.model_dim,
            style_dim=config.style_dim, layers=config.encoder_layers,
            heads=config.heads, ff_mult=config.ff_mult,
            dropout=config.dropout)
        self.duration_model = DurationModel(
            model_dim=config.model_dim, num_phonemes=config.num_phonemes,
            dropout=config.dropout,
            detach_predictor_input=config.detach_duration_input,
            refine_durations=config.refine_durations)
        self.decoder = ExpressionDecoder(
            model_dim=config.model_dim, style_dim=config.style_dim,
            layers=config.decoder_layers, heads=config.heads,
            ff_mult=config.ff_mult, dropout=config.dropout,
            output_dim=NUM_BLENDWEIGHTS, radius=config.relative_radius,
            use_relative=config.use_relative_position)

    def encode_style(self, window: torch.Tensor) -> torch.Tensor:
        return self.expression_encoder.encode_style(window)

    def extract_style(self, clip: torch.Tensor) -> torch.Tensor:
        """Average the style vectors of the clip's 48-frame tiles.

        A clip shorter than one window (but at least 8 frames) is encoded
        whole; a ragged tail re-uses the last full window's span.
        """
        frames = clip.shape[0]
        if frames < MIN_ENCODER_FRAMES:
            raise WindowTooShort(
                f"style reference needs at least {MIN_ENCODER_FRAMES} "
                f"frames, got {frames}")
        if frames <= WINDOW_FRAMES:
            return self.encode_style(clip)
        starts = list(range(0, frames - WINDOW_FRAMES + 1, WINDOW_FRAMES))
        if starts[-1] != frames - WINDOW_FRAMES:
            starts.append(frames - WINDOW_FRAMES)
        vectors = [self.encode_style(clip[s:s + WINDOW_FRAMES])
                   for s in starts]
        return torch.stack(vectors).mean(dim=0)

    def _style_or_none(self, style):
        return style if self.config.use_style else None

    def encode_speech(self, speech: torch.Tensor,
                      style: torch.Tensor | None) -> torch.Tensor:
        return self.speech_encoder(speech, self._style_or_none(style))

    def decoder_input(self, h_w2v: torch.Tensor, durations_speech=None,
                      total_expr: int | None = None):
        """Route through the configured duration pipeline.

        Ground-truth durations select teacher forcing; None selects the
        predicted path (or plain pooling when duration modeling is off).
        """
        if not self.config.use_duration:
            return self.duration_model.uniform(h_w2v)
        if durations_speech is not None:
            return self.duration_model.teacher_forced(
                h_w2v, durations_speech, total_expr=total_expr)
        return self.duration_model.predicted(h_w2v)

    def generate(self, speech: torch.Tensor, style: torch.Tensor | None,
                 durations_speech=None, total_expr: int | None = None,
                 mask=None, context_expressions=None):
        """Speech (and optional ground-truth durations) to blendweights."""
        style = self._style_or_none(style)
        h_w2v = self.speech_encoder(speech, style)
        h_d, aux = self.decoder_input(h_w2v, durations_speech, total_expr)
        output = self.decoder(h_d, style=style, mask=mask,
                              context_expressions=context_expressions)
        aux["h_w2v"] = h_w2v
        return output, aux


MODEL_PREFIX = "model/"
CONFIG_KEY = "__config__/model"
META_STEP_KEY = "__meta__/step"


def model_arrays(model: SpeakStyleModel) -> dict[str, np.ndarray]:
    arrays = state_dict_arrays(model, MODEL_PREFIX)
    arrays[CONFIG_KEY] = pack_json(model.config.to_dict())
    return arrays


def save_model(path, model: SpeakStyleModel, step: int = 0,
               extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    arrays = model_arrays(model)
    arrays[META_STEP_KEY] = np.array([step], dtype=np.float32)
    if extra_arrays:
        arrays.update(extra_arrays)
    save_archive(path, arrays)


def load_model(path) -> tuple[SpeakStyleModel, dict[str, np.ndarray]]:
    """Rebuild a model from an archive; returns it with the raw entries."""
    arrays = load_archive(path)
    if CONFIG_KEY not in arrays:
        raise ShapeMismatch(f"{path}: archive has no model config entry")
    config = ModelConfig.from_dict(unpack_json(arrays[CONFIG_KEY]))
    model = SpeakStyleModel(config)
    load_state_arrays(model, arrays, MODEL_PREFIX)
    model.eval()
    return model, arrays


def checkpoint_step(arrays: dict[str, np.ndarray]) -> int:
    if META_STEP_KEY not in arrays:
        return 0
    return int(arrays[META_STEP_KEY][0])


def _style_schedule_segments(schedule: list[tuple[int, str]],
                             total_frames: int) -> list[tuple[int, int, str]]:
    if not schedule:
        raise ConfigError("emotion schedule is empty")
    frames = [f for f, _ in schedule]
    if frames[0] != 0:
        raise ConfigError("emotion schedule must start at frame 0")
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise ConfigError("emotion schedule frames must strictly increase")
    segments = []
    for i, (start, label) in enumerate(schedule):
        if start >= total_frames:
            break
        end = schedule[i + 1][0] if i + 1 < len(schedule) else total_frames
        segments.append((start, min(end, total_frames), label))
    return segments


@torch.no_grad()
def synthesize_sequence(model: SpeakStyleModel, speech: torch.Tensor,
                        styles: dict[str, torch.Tensor],
                        schedule: list[tuple[int, str]] | None = None):
    """Long-form synthesis with per-segment styles and masked transitions.

    The phoneme timeline is fixed once using the first scheduled style;
    each style then re-encodes the speech and decodes its own segment.  A
    style change at frame f re-decodes a 48-frame window straddling f with
    the span before f masked out, context taken from the already-decoded
    buffer and the target frame from the incoming segment.

    Returns (blendweights ndarray (T, 41), sidecar dict).
    """
    model.eval()
    if schedule is None:
        schedule = [(0, next(iter(styles)))]
    for _, label in schedule:
        if label not in styles:
            raise ConfigError(f"no style provided for label {label!r}")

    first_label = schedule[0][1]
    first_style = model._style_or_none(styles[first_label])
    h_w2v = model.speech_encoder(speech, first_style)
    if model.config.use_duration:
        _, aux = model.duration_model.predicted(h_w2v)
        run_durations = aux["durations_speech"]
        durations_expr = aux["durations_expr"]
        total_frames = int(durations_expr.sum())
    else:
        run_durations = None
        total_frames = speech.shape[0] // RATE_RATIO

    segments = _style_schedule_segments(schedule, total_frames)

    def decoder_input_for(label: str):
        style = model._style_or_none(styles[label])
        h = model.speech_encoder(speech, style)
        if not model.config.use_duration:
            h_d, _ = model.duration_model.uniform(h)
            return h_d, style
        h_pho = downsample_by_duration(h, run_durations)
        h_up = upsample_by_duration(h_pho, durations_expr)
        pe_d = duration_position_embedding(durations_expr, model.config.model_dim,
                                           dtype=h_up.dtype, device=h_up.device)
        return build_decoder_input(h_up, pe_d), style

    inputs = {}
    for label in {label for _, _, label in segments}:
        inputs[label] = decoder_input_for(label)

    output = torch.zeros(total_frames, NUM_BLENDWEIGHTS)
    for start, end, label in segments:
        h_d, style = inputs[label]
        output[start:end] = model.decoder(h_d, style=style)[start:end]

    transitions = []
    for prev_seg, seg in zip(segments, segments[1:]):
        prev_label = prev_seg[2]
        start, _, label = seg
        f = start
        w_start = max(0, f - TRANSITION_HALF_WINDOW)
        w_end = min(total_frames, w_start + WINDOW_FRAMES)
        target_local = f - w_start
        context_len = max(1, target_local - TRANSITION_GAP)
        if not 0 < context_len < target_local:
            transitions.append({"target_frame": f, "from": prev_label,
                                "to": label, "skipped": True})
            continue
        mask = build_transition_mask(w_end - w_start, context_len,
                                     target_local)
        h_d, style = inputs[label]
        if model.config.transition_style_interpolation and style is not None:
            prev_style = model._style_or_none(styles[prev_label])
            alpha = torch.linspace(0.0, 1.0, w_end - w_start).unsqueeze(1)
            style = (1 - alpha) * prev_style + alpha * style
        window = model.decoder(h_d[w_start:w_end], style=style, mask=mask,
                               context_expressions=output[w_start:w_end])
        masked_idx = torch.tensor(mask.masked, dtype=torch.long)
        output[w_start + masked_idx] = window[masked_idx]
        transitions.append({
            "window_start": w_start, "window_end": w_end,
            "target_frame": f, "context_len": context_len,
            "from": prev_label, "to": label, "skipped": False,
        })

    sidecar = {
        "frames": total_frames,
        "windows": [{"start": s, "end": e, "style": label}
                    for s, e, label in segments],
        "transitions": transitions,
    }
    return output.numpy().astype(np.float32), sidecar

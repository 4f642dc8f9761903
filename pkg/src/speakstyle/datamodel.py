"""Core sequence types, constants, and file ingestion.

Sequences come in two clock rates: facial blendweights at 25 fps and speech
features / phoneme labels at 100 fps, a fixed 4:1 ratio.  All types are
immutable after construction (backing arrays are frozen), so instances are
safe to share across threads.

File formats:
  * blendweights: UTF-8 CSV, one frame per row, 41 decimal columns, no header
  * speech features: 8-byte header (uint32 T', uint32 F, little-endian)
    followed by T'*F little-endian float32 values, row-major
  * alignment: TSV rows ``symbol<TAB>duration_frames`` (durations at 100 fps)
  * manifest: JSON lines, one sample per line with relative file paths
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DataError,
    DurationMismatch,
    MalformedRow,
    MissingFile,
    OutOfBounds,
    UnknownPhoneme,
    WeightOutOfRange,
)

NUM_BLENDWEIGHTS = 41
EXPRESSION_FPS = 25
SPEECH_FPS = 100
RATE_RATIO = SPEECH_FPS // EXPRESSION_FPS  # exactly 4
WINDOW_FRAMES = 48
# Paired speech/expression files may disagree by at most this many speech
# frames before being rejected (no silent resampling).
PAIR_LENGTH_TOLERANCE = 3

NUM_EMOTIONS = 6
EMOTIONS = ("neutral", "anger", "happiness", "sadness", "disgust", "fear")
EMOTION_IDS = {name: i for i, name in enumerate(EMOTIONS)}

# Region layout of the 41 blendweights: brow, eyelid, lip, chin, cheek, jaw.
BROW_INDICES = tuple(range(0, 6))
EYELID_INDICES = tuple(range(6, 12))
LIP_INDICES = tuple(range(12, 28))
CHIN_INDICES = tuple(range(28, 32))
CHEEK_INDICES = tuple(range(32, 37))
JAW_INDICES = tuple(range(37, 41))
# Brow plus eyelid carry the emotion offsets in the synthetic corpus.
UPPER_FACE_INDICES = BROW_INDICES + EYELID_INDICES

# ARPAbet-style inventory: silence plus 43 phones, 44 classes total.
SILENCE = "SIL"
_VOWELS = (
    "AA", "AE", "AH", "AO", "AW", "AX", "AXR", "AY",
    "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
)
_STOPS = ("B", "D", "G", "K", "P", "T")
_OTHER_CONSONANTS = (
    "CH", "DH", "DX", "F", "HH", "JH", "L", "M", "N", "NG", "NX",
    "R", "S", "SH", "TH", "V", "W", "Y", "Z", "ZH",
)
PHONEMES = (SILENCE,) + _VOWELS + _STOPS + _OTHER_CONSONANTS
NUM_PHONEMES = len(PHONEMES)  # 44
PHONEME_IDS = {sym: i for i, sym in enumerate(PHONEMES)}
VOWEL_IDS = frozenset(PHONEME_IDS[s] for s in _VOWELS)
STOP_IDS = frozenset(PHONEME_IDS[s] for s in _STOPS)
SILENCE_ID = PHONEME_IDS[SILENCE]


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class BlendweightSequence:
    """A T x 41 matrix of blendshape activation weights at 25 fps.

    ``identity_id`` / ``emotion_id`` are -1 when unlabeled (e.g. synthesized
    output).
    """

    frames: np.ndarray
    identity_id: int = -1
    emotion_id: int = -1
    fps: int = EXPRESSION_FPS

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] != NUM_BLENDWEIGHTS:
            raise DataError(
                f"blendweight matrix must be T x {NUM_BLENDWEIGHTS}, "
                f"got {frames.shape}"
            )
        if frames.shape[0] < 1:
            raise DataError("blendweight sequence needs at least one frame")
        if not np.isfinite(frames).all():
            raise DataError("blendweight sequence contains non-finite values")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise DataError("blendweights must lie in [0, 1]")
        object.__setattr__(self, "frames", _freeze(frames))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class SpeechFeatureSequence:
    """A T' x F matrix of per-frame speech embeddings at 100 fps."""

    frames: np.ndarray
    fps: int = SPEECH_FPS

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise DataError(
                f"speech features must be a T' x F matrix with T' >= 1, "
                f"got shape {frames.shape}"
            )
        if not np.isfinite(frames).all():
            raise DataError("speech features contain non-finite values")
        object.__setattr__(self, "frames", _freeze(frames))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


def expand_durations(phonemes: Sequence[int], durations: Sequence[int]) -> np.ndarray:
    """Expand (phonemes, durations) into per-frame labels."""
    return np.repeat(np.asarray(phonemes, dtype=np.int64),
                     np.asarray(durations, dtype=np.int64))


def group_frames(frame_labels: Sequence[int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Group per-frame labels into (phonemes, durations) runs.

    Inverse of :func:`expand_durations` for alignments with no two
    consecutive identical phoneme entries.
    """
    labels = np.asarray(frame_labels, dtype=np.int64)
    if labels.size == 0:
        return (), ()
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [labels.size]))
    return tuple(int(labels[s]) for s in starts), tuple(int(e - s) for s, e in zip(starts, ends))


@dataclass(frozen=True)
class PhonemeAlignment:
    """Phoneme class ids with integer frame durations at 100 fps.

    Consecutive identical phonemes are expected to be merged before
    construction (see :meth:`create`), which keeps expansion and grouping a
    bijection.
    """

    phonemes: tuple[int, ...]
    durations: tuple[int, ...]

    def __post_init__(self):
        if len(self.phonemes) != len(self.durations) or not self.phonemes:
            raise DataError("alignment needs matching, non-empty phoneme and "
                            "duration lists")
        if any(d < 1 for d in self.durations):
            raise DataError("every phoneme duration must be >= 1")
        if any(not 0 <= p < NUM_PHONEMES for p in self.phonemes):
            raise DataError("phoneme id out of inventory range")
        if any(a == b for a, b in zip(self.phonemes, self.phonemes[1:])):
            raise DataError("consecutive identical phonemes must be merged")

    @classmethod
    def create(cls, phonemes: Iterable[int], durations: Iterable[int]) -> "PhonemeAlignment":
        """Build an alignment, merging consecutive identical phonemes."""
        merged_p: list[int] = []
        merged_d: list[int] = []
        for p, d in zip(phonemes, durations):
            if merged_p and merged_p[-1] == p:
                merged_d[-1] += int(d)
            else:
                merged_p.append(int(p))
                merged_d.append(int(d))
        return cls(tuple(merged_p), tuple(merged_d))

    @classmethod
    def from_frame_labels(cls, frame_labels: Sequence[int]) -> "PhonemeAlignment":
        phonemes, durations = group_frames(frame_labels)
        return cls(phonemes, durations)

    @cached_property
    def frame_labels(self) -> np.ndarray:
        return _freeze(expand_durations(self.phonemes, self.durations))

    @property
    def num_phonemes(self) -> int:
        return len(self.phonemes)

    @property
    def total_frames(self) -> int:
        return int(sum(self.durations))


@dataclass(frozen=True)
class SampleRecord:
    """A paired speech / expression / alignment sample."""

    speech: SpeechFeatureSequence
    expression: BlendweightSequence
    alignment: PhonemeAlignment
    identity_id: int
    emotion_id: int

    def __post_init__(self):
        t_speech = self.speech.num_frames
        t_expr = self.expression.num_frames
        if abs(t_speech - RATE_RATIO * t_expr) > PAIR_LENGTH_TOLERANCE:
            raise DataError(
                f"speech length {t_speech} disagrees with {RATE_RATIO}x "
                f"expression length {t_expr} by more than "
                f"{PAIR_LENGTH_TOLERANCE} frames"
            )
        if self.alignment.total_frames != t_speech:
            raise DataError(
                f"alignment covers {self.alignment.total_frames} frames, "
                f"speech has {t_speech}"
            )

    @property
    def num_expression_frames(self) -> int:
        return self.expression.num_frames


# --- blendweight CSV --------------------------------------------------------

def load_blendweights(path, identity_id: int = -1, emotion_id: int = -1) -> BlendweightSequence:
    """Load a blendweight CSV; rejects malformed rows and out-of-range weights."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != NUM_BLENDWEIGHTS:
                raise MalformedRow(
                    path, lineno,
                    f"expected {NUM_BLENDWEIGHTS} columns, got {len(cells)}")
            try:
                values = [float(c) for c in cells]
            except ValueError as exc:
                raise MalformedRow(path, lineno, str(exc)) from exc
            for col, v in enumerate(values):
                if not np.isfinite(v) or v < 0.0 or v > 1.0:
                    raise WeightOutOfRange(path, lineno, col, v)
            rows.append(values)
    if not rows:
        raise MalformedRow(path, 0, "file holds no frames")
    return BlendweightSequence(np.array(rows, dtype=np.float32),
                               identity_id=identity_id, emotion_id=emotion_id)


def save_blendweights(seq: BlendweightSequence, path) -> None:
    """Write a blendweight CSV that loads back bitwise identical."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for row in seq.frames:
            # repr of the float64 view of a float32 round-trips exactly
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


# --- speech feature binary --------------------------------------------------

_SPEECH_HEADER = struct.Struct("<II")


def load_speech_features(path) -> SpeechFeatureSequence:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    raw = path.read_bytes()
    if len(raw) < _SPEECH_HEADER.size:
        raise DataError(f"{path}: truncated header")
    t, f = _SPEECH_HEADER.unpack_from(raw)
    expected = _SPEECH_HEADER.size + 4 * t * f
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {t}x{f} "
                        f"features, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_SPEECH_HEADER.size)
    return SpeechFeatureSequence(frames.reshape(t, f).copy())


def save_speech_features(seq: SpeechFeatureSequence, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_SPEECH_HEADER.pack(seq.num_frames, seq.feature_dim))
        fh.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


# --- alignment TSV ----------------------------------------------------------

def load_alignment(path, total_speech_frames: int,
                   inventory: dict[str, int] | None = None) -> PhonemeAlignment:
    """Load a phoneme/duration TSV and check it covers the speech exactly."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    ids = PHONEME_IDS if inventory is None else inventory
    phonemes: list[int] = []
    durations: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedRow(path, lineno,
                                   "expected symbol<TAB>duration")
            symbol, dur_text = parts
            if symbol not in ids:
                raise UnknownPhoneme(symbol)
            try:
                dur = int(dur_text)
            except ValueError as exc:
                raise MalformedRow(path, lineno, str(exc)) from exc
            if dur < 1:
                raise MalformedRow(path, lineno, f"duration {dur} < 1")
            phonemes.append(ids[symbol])
            durations.append(dur)
    total = sum(durations)
    if total != total_speech_frames:
        raise DurationMismatch(total, total_speech_frames)
    return PhonemeAlignment.create(phonemes, durations)


def save_alignment(alignment: PhonemeAlignment, path,
                   symbols: Sequence[str] = PHONEMES) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for p, d in zip(alignment.phonemes, alignment.durations):
            fh.write(f"{symbols[p]}\t{d}\n")


# --- windowing --------------------------------------------------------------

def window_sample(sample: SampleRecord, start_expr_frame: int,
                  len_expr: int = WINDOW_FRAMES) -> SampleRecord:
    """Cut an aligned window: expression [start, start+len), speech at 4x.

    Phonemes cut at the window edges keep their partial durations.
    """
    if len_expr < 1:
        raise OutOfBounds(f"window length {len_expr} < 1")
    t_expr = sample.expression.num_frames
    start = start_expr_frame
    if start < 0 or start + len_expr > t_expr:
        raise OutOfBounds(
            f"expression window [{start}, {start + len_expr}) outside "
            f"[0, {t_expr})")
    s_lo = RATE_RATIO * start
    s_hi = RATE_RATIO * (start + len_expr)
    if s_hi > sample.speech.num_frames:
        raise OutOfBounds(
            f"speech window [{s_lo}, {s_hi}) outside "
            f"[0, {sample.speech.num_frames})")
    expr = BlendweightSequence(sample.expression.frames[start:start + len_expr],
                               identity_id=sample.identity_id,
                               emotion_id=sample.emotion_id)
    speech = SpeechFeatureSequence(sample.speech.frames[s_lo:s_hi])
    alignment = PhonemeAlignment.from_frame_labels(
        sample.alignment.frame_labels[s_lo:s_hi])
    return SampleRecord(speech=speech, expression=expr, alignment=alignment,
                        identity_id=sample.identity_id,
                        emotion_id=sample.emotion_id)


# --- manifest ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    speech: str
    expression: str
    alignment: str
    identity_id: int
    emotion_id: int


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({
                "speech": e.speech,
                "expression": e.expression,
                "alignment": e.alignment,
                "identity_id": e.identity_id,
                "emotion_id": e.emotion_id,
            }, sort_keys=True))
            fh.write("\n")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                entries.append(ManifestEntry(
                    speech=obj["speech"],
                    expression=obj["expression"],
                    alignment=obj["alignment"],
                    identity_id=int(obj["identity_id"]),
                    emotion_id=int(obj["emotion_id"]),
                ))
            except (KeyError, ValueError, TypeError) as exc:
                raise MalformedRow(path, lineno, str(exc)) from exc
    return entries


def load_manifest(path) -> list[SampleRecord]:
    """Load every sample referenced by a manifest (paths relative to it)."""
    path = Path(path)
    base = path.parent
    records = []
    for e in read_manifest(path):
        speech = load_speech_features(base / e.speech)
        expression = load_blendweights(base / e.expression,
                                       identity_id=e.identity_id,
                                       emotion_id=e.emotion_id)
        alignment = load_alignment(base / e.alignment, speech.num_frames)
        records.append(SampleRecord(speech=speech, expression=expression,
                                    alignment=alignment,
                                    identity_id=e.identity_id,
                                    emotion_id=e.emotion_id))
    return records


# --- style vector file ------------------------------------------------------

_STYLE_HEADER = struct.Struct("<I")


def save_style_vector(vector: np.ndarray, path) -> None:
    """Write a style vector as a length header plus little-endian floats."""
    vec = np.ascontiguousarray(vector, dtype="<f4").reshape(-1)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_STYLE_HEADER.pack(vec.size))
        fh.write(vec.tobytes())


def load_style_vector(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    raw = path.read_bytes()
    if len(raw) < _STYLE_HEADER.size:
        raise DataError(f"{path}: truncated header")
    n, = _STYLE_HEADER.unpack_from(raw)
    expected = _STYLE_HEADER.size + 4 * n
    if len(raw) != expected:
        raise DataError(
            f"{path}: expected {expected} bytes for {n} floats, "
            f"found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_STYLE_HEADER.size).copy()

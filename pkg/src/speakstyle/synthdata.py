"""Synthetic multi-identity, multi-emotion corpus with known ground truth.

Construction, per sample:
  * a random phoneme sequence with per-class log-normal durations (vowels
    longer than stops)
  * lip-region blendweights follow a fixed per-phoneme target sub-vector,
    shaped by an attack-decay envelope across the phoneme's expression-rate
    extent (the same largest-remainder conversion the alignment pipeline
    uses), so predicting a lip frame requires knowing which phoneme it
    belongs to and where it sits inside that phoneme's converted extent
  * a per-identity secret affine transform (gain, bias) shapes the motion
  * each non-neutral emotion adds a fixed offset on brow/eyelid weights
  * speech features are per-class embeddings plus heavy frame noise, so a
    single frame only hints at the phoneme; a clean readout needs evidence
    pooled across the phoneme's full extent

Everything derives deterministically from one integer seed; per-sample
streams use derived seeds, so generation can be partitioned by sample index.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datamodel as dm
from . import duration as du
from .errors import UnknownId

# Log-normal duration parameters per phoneme class, in 100 fps speech frames.
DURATION_SIGMA = 0.35
_MU_SILENCE = float(np.log(16.0))
_MU_VOWEL = float(np.log(12.0))
_MU_STOP = float(np.log(5.0))
_MU_OTHER = float(np.log(8.0))

LIP_TARGET_LOW = 0.15
LIP_TARGET_HIGH = 0.75
ARTICULATION_FLOOR = 0.55
BASE_LEVEL = 0.35
SPEECH_NOISE_STD = 0.8
GAIN_RANGE = (0.75, 1.25)
BIAS_RANGE = (-0.12, 0.12)
EMOTION_OFFSET_RANGE = (-0.25, 0.25)

# Namespaces for derived RNG streams.
_NS_LIP, _NS_EMB, _NS_IDENTITY, _NS_EMOTION, _NS_SAMPLE = 1, 2, 3, 4, 5


def duration_mu(phoneme_id: int) -> float:
    """Declared log-normal location for a phoneme class."""
    if phoneme_id == dm.SILENCE_ID:
        return _MU_SILENCE
    if phoneme_id in dm.VOWEL_IDS:
        return _MU_VOWEL
    if phoneme_id in dm.STOP_IDS:
        return _MU_STOP
    return _MU_OTHER


def declared_duration_mean(phoneme_id: int) -> float:
    """Analytic mean of the declared duration distribution."""
    return float(np.exp(duration_mu(phoneme_id) + DURATION_SIGMA ** 2 / 2))


def articulation_envelope(durations) -> np.ndarray:
    """Per-frame attack-decay modulation over each phoneme's extent.

    Takes per-phoneme frame counts and rises from ARTICULATION_FLOOR at
    the phoneme edges to 1.0 at its center, so the lip trajectory depends
    on the frame's position within the phoneme.
    """
    parts = []
    for n in np.asarray(durations, dtype=np.int64):
        pos = (np.arange(n) + 0.5) / n
        parts.append(ARTICULATION_FLOOR
                     + (1.0 - ARTICULATION_FLOOR) * np.sin(np.pi * pos))
    return np.concatenate(parts)


@dataclass(frozen=True)
class StyleDescriptor:
    """Secret affine parameters realizing one (identity, emotion) style."""

    gain: np.ndarray
    bias: np.ndarray
    emotion_offset: np.ndarray


class CorpusGenerator:
    """Seed-deterministic generator for the synthetic corpus."""

    def __init__(self, seed: int, num_identities: int = 4,
                 num_emotions: int = dm.NUM_EMOTIONS,
                 samples_per_cell: int = 2, frames_per_sample: int = 96,
                 feature_dim: int = 64, noise_std: float = 0.02):
        if num_identities < 2:
            raise ValueError("need at least 2 identities")
        if not 1 <= num_emotions <= dm.NUM_EMOTIONS:
            raise ValueError(f"num_emotions must be in [1, {dm.NUM_EMOTIONS}]")
        if frames_per_sample < dm.WINDOW_FRAMES:
            raise ValueError(
                f"frames_per_sample must be >= {dm.WINDOW_FRAMES}")
        if samples_per_cell < 1:
            raise ValueError("samples_per_cell must be >= 1")
        self.seed = seed
        self.num_identities = num_identities
        self.num_emotions = num_emotions
        self.samples_per_cell = samples_per_cell
        self.frames_per_sample = frames_per_sample
        self.feature_dim = feature_dim
        self.noise_std = noise_std

        n_lip = len(dm.LIP_INDICES)
        lip_rng = np.random.default_rng([seed, _NS_LIP])
        self.lip_targets = lip_rng.uniform(
            LIP_TARGET_LOW, LIP_TARGET_HIGH, size=(dm.NUM_PHONEMES, n_lip))
        emb_rng = np.random.default_rng([seed, _NS_EMB])
        self.phoneme_embeddings = emb_rng.normal(
            0.0, 1.0, size=(dm.NUM_PHONEMES, feature_dim))

    # --- ground truth -------------------------------------------------------

    def ground_truth_style(self, identity_id: int, emotion_id: int) -> StyleDescriptor:
        if not 0 <= identity_id < self.num_identities:
            raise UnknownId(f"identity {identity_id} outside "
                            f"[0, {self.num_identities})")
        if not 0 <= emotion_id < self.num_emotions:
            raise UnknownId(f"emotion {emotion_id} outside "
                            f"[0, {self.num_emotions})")
        id_rng = np.random.default_rng([self.seed, _NS_IDENTITY, identity_id])
        gain = id_rng.uniform(*GAIN_RANGE, size=dm.NUM_BLENDWEIGHTS)
        bias = id_rng.uniform(*BIAS_RANGE, size=dm.NUM_BLENDWEIGHTS)
        offset = np.zeros(dm.NUM_BLENDWEIGHTS)
        if emotion_id != 0:
            emo_rng = np.random.default_rng([self.seed, _NS_EMOTION, emotion_id])
            offset[list(dm.UPPER_FACE_INDICES)] = emo_rng.uniform(
                *EMOTION_OFFSET_RANGE, size=len(dm.UPPER_FACE_INDICES))
        return StyleDescriptor(gain=gain, bias=bias, emotion_offset=offset)

    # --- sampling -----------------------------------------------------------

    def _sample_alignment(self, rng: np.random.Generator,
                          total_frames: int) -> dm.PhonemeAlignment:
        phonemes: list[int] = []
        durations: list[int] = []
        total = 0
        prev = -1
        while total < total_frames:
            if not phonemes or (prev != dm.SILENCE_ID and rng.random() < 0.12):
                p = dm.SILENCE_ID
            else:
                p = int(rng.integers(1, dm.NUM_PHONEMES))
                while p == prev:
                    p = int(rng.integers(1, dm.NUM_PHONEMES))
            d = int(max(1, round(np.exp(rng.normal(duration_mu(p),
                                                   DURATION_SIGMA)))))
            d = min(d, total_frames - total)
            if d == 0:
                break
            phonemes.append(p)
            durations.append(d)
            total += d
            prev = p
        return dm.PhonemeAlignment.create(phonemes, durations)

    def generate_sample(self, identity_id: int, emotion_id: int,
                        index: int) -> dm.SampleRecord:
        style = self.ground_truth_style(identity_id, emotion_id)
        rng = np.random.default_rng(
            [self.seed, _NS_SAMPLE, identity_id, emotion_id, index])
        t_expr = self.frames_per_sample
        t_speech = dm.RATE_RATIO * t_expr
        alignment = self._sample_alignment(rng, t_speech)
        labels = alignment.frame_labels

        base = np.full((t_expr, dm.NUM_BLENDWEIGHTS), BASE_LEVEL)
        extents = du.rate_convert(alignment.durations, total=t_expr)
        labels_25 = np.repeat(np.asarray(alignment.phonemes), extents)
        envelope = articulation_envelope(extents)
        base[:, list(dm.LIP_INDICES)] = (self.lip_targets[labels_25]
                                         * envelope[:, None])
        weights = style.gain * base + style.bias + style.emotion_offset
        weights += rng.normal(0.0, self.noise_std, size=weights.shape)
        weights = np.clip(weights, 0.0, 1.0)

        features = self.phoneme_embeddings[labels]
        features = features + rng.normal(0.0, SPEECH_NOISE_STD,
                                         size=features.shape)
        return dm.SampleRecord(
            speech=dm.SpeechFeatureSequence(features.astype(np.float32)),
            expression=dm.BlendweightSequence(weights.astype(np.float32),
                                              identity_id=identity_id,
                                              emotion_id=emotion_id),
            alignment=alignment,
            identity_id=identity_id,
            emotion_id=emotion_id,
        )

    def generate(self) -> list[dm.SampleRecord]:
        records = []
        for identity in range(self.num_identities):
            for emotion in range(self.num_emotions):
                for index in range(self.samples_per_cell):
                    records.append(self.generate_sample(identity, emotion,
                                                        index))
        return records


def generate_corpus(seed: int, num_identities: int = 4,
                    num_emotions: int = dm.NUM_EMOTIONS,
                    samples_per_cell: int = 2, frames_per_sample: int = 96,
                    feature_dim: int = 64,
                    noise_std: float = 0.02) -> list[dm.SampleRecord]:
    """Generate the full K x emotions x samples_per_cell corpus."""
    return CorpusGenerator(seed, num_identities=num_identities,
                           num_emotions=num_emotions,
                           samples_per_cell=samples_per_cell,
                           frames_per_sample=frames_per_sample,
                           feature_dim=feature_dim,
                           noise_std=noise_std).generate()


def write_corpus(records: list[dm.SampleRecord], out_dir) -> Path:
    """Write a corpus in the manifest/CSV/binary formats; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        stem = f"sample_{i:04d}"
        dm.save_blendweights(rec.expression, out_dir / f"{stem}.expr.csv")
        dm.save_speech_features(rec.speech, out_dir / f"{stem}.speech.bin")
        dm.save_alignment(rec.alignment, out_dir / f"{stem}.align.tsv")
        entries.append(dm.ManifestEntry(
            speech=f"{stem}.speech.bin",
            expression=f"{stem}.expr.csv",
            alignment=f"{stem}.align.tsv",
            identity_id=rec.identity_id,
            emotion_id=rec.emotion_id,
        ))
    manifest = out_dir / "manifest.jsonl"
    dm.write_manifest(entries, manifest)
    return manifest

"""Metrics and evaluation protocols: lip-vertex error against a synthetic
blendshape basis, Fréchet distance over projected windows, a contrastive
sync scorer, the ablation table, and style-embedding export.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .datamodel import (EMOTIONS, LIP_INDICES, NUM_BLENDWEIGHTS, RATE_RATIO,
                        SampleRecord, WINDOW_FRAMES, group_frames)
from .discriminators import SyncDiscriminator
from .errors import (MissingScorer, MissingVariant, NonFiniteCovariance,
                     ShapeMismatch, TooFewSamples)
from .model import SpeakStyleModel, load_model
from .nn import (load_archive, load_state_arrays, pack_json, save_archive,
                 state_dict_arrays, unpack_json)

BASIS_SEED = 7
PROJECTION_SEED = 11
REQUIRED_VARIANTS = ("full", "no_duration", "no_style", "no_relpos",
                     "no_disc")


# --- blendshape basis and LVE ----------------------------------------------

@dataclass(frozen=True)
class BlendshapeBasis:
    """Linear blendshape model: vertices = neutral + weights . offsets."""

    offsets: np.ndarray      # (num_blendweights, V, 3)
    neutral: np.ndarray      # (V, 3)
    lip_vertex_ids: tuple[int, ...]

    def __post_init__(self):
        v = self.neutral.shape[0]
        if v < 1:
            raise ShapeMismatch("basis needs at least one vertex")
        if self.offsets.shape[1] != v or self.offsets.shape[2] != 3:
            raise ShapeMismatch(
                f"offsets {self.offsets.shape} inconsistent with "
                f"{v} vertices")
        if any(i < 0 or i >= v for i in self.lip_vertex_ids):
            raise ShapeMismatch("lip vertex id out of range")

    def vertices(self, weights: np.ndarray) -> np.ndarray:
        w = np.asarray(weights, dtype=np.float64)
        return self.neutral + np.einsum("tb,bvc->tvc", w, self.offsets)


def synthetic_basis(seed: int = BASIS_SEED, num_vertices: int = 120,
                    num_lip_vertices: int = 20) -> BlendshapeBasis:
    """Fixed-seed stand-in basis; lip vertices respond mostly to lip weights."""
    rng = np.random.default_rng([seed, 1])
    offsets = 0.1 * rng.normal(size=(NUM_BLENDWEIGHTS, num_vertices, 3))
    lip_ids = tuple(int(i) for i in
                    rng.choice(num_vertices, size=num_lip_vertices,
                               replace=False))
    for b in LIP_INDICES:
        offsets[b, lip_ids, :] += rng.normal(size=(num_lip_vertices, 3))
    neutral = rng.normal(size=(num_vertices, 3))
    return BlendshapeBasis(offsets=offsets, neutral=neutral,
                           lip_vertex_ids=lip_ids)


def _as_sequences(data) -> list[np.ndarray]:
    if isinstance(data, np.ndarray) and data.ndim == 2:
        return [data]
    return [np.asarray(seq) for seq in data]


def lve(real, generated, basis: BlendshapeBasis) -> float:
    """Maximal lip-vertex L2 error per frame, averaged over frames then
    sequences.
    """
    real_seqs = _as_sequences(real)
    gen_seqs = _as_sequences(generated)
    if len(real_seqs) != len(gen_seqs):
        raise ShapeMismatch(
            f"{len(real_seqs)} real vs {len(gen_seqs)} generated sequences")
    lip = np.asarray(basis.lip_vertex_ids, dtype=np.int64)
    per_sequence = []
    for y, y_hat in zip(real_seqs, gen_seqs):
        if y.shape != y_hat.shape:
            raise ShapeMismatch(
                f"sequence shapes differ: {y.shape} vs {y_hat.shape}")
        diff = basis.vertices(y)[:, lip, :] - basis.vertices(y_hat)[:, lip, :]
        per_frame_max = np.linalg.norm(diff, axis=2).max(axis=1)
        per_sequence.append(per_frame_max.mean())
    return float(np.mean(per_sequence))


# --- Fréchet distance -------------------------------------------------------

def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    sym = (matrix + matrix.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real_features: np.ndarray, gen_features: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    x = np.asarray(real_features, dtype=np.float64)
    y = np.asarray(gen_features, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeMismatch("feature sets must be 2-D (samples x dims)")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise TooFewSamples("need at least 2 samples per side")
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    sigma_x = np.cov(x, rowvar=False)
    sigma_y = np.cov(y, rowvar=False)
    if x.shape[1] == 1:
        sigma_x = sigma_x.reshape(1, 1)
        sigma_y = sigma_y.reshape(1, 1)
    for sigma in (sigma_x, sigma_y):
        if not np.isfinite(sigma).all():
            raise NonFiniteCovariance("covariance has non-finite entries")
    root_x = _sqrt_psd(sigma_x)
    covmean_trace = np.trace(_sqrt_psd(root_x @ sigma_y @ root_x))
    delta = mu_x - mu_y
    value = float(delta @ delta + np.trace(sigma_x) + np.trace(sigma_y)
                  - 2.0 * covmean_trace)
    return max(value, 0.0)


def sequence_windows(weights: np.ndarray,
                     window: int = WINDOW_FRAMES) -> list[np.ndarray]:
    """Non-overlapping full windows of a weight sequence (tail dropped)."""
    frames = weights.shape[0]
    return [weights[s:s + window] for s in range(0, frames - window + 1,
                                                 window)]


def window_features(windows, dim: int = 128,
                    seed: int = PROJECTION_SEED) -> np.ndarray:
    """Flatten windows and project with a fixed seeded Gaussian matrix."""
    stack = np.stack([np.asarray(w, dtype=np.float64).reshape(-1)
                      for w in windows])
    rng = np.random.default_rng([seed, stack.shape[1], dim])
    projection = rng.normal(size=(stack.shape[1], dim)) \
        / np.sqrt(stack.shape[1])
    return stack @ projection


# --- sync scorer ------------------------------------------------------------

SCORER_PREFIX = "scorer/"
SCORER_CONFIG_KEY = "__config__/scorer"


def train_sync_scorer(records: list[SampleRecord], seed: int = 0,
                      steps: int = 300, batch_size: int = 8,
                      lr: float = 1e-3, shift_min: int = 8,
                      shift_max: int = 16,
                      model_dim: int = 32) -> SyncDiscriminator:
    """Contrastive scorer over raw speech features: matched windows toward 1,
    shifted windows toward 0 (binary cross-entropy on frame logits).
    """
    feature_dim = records[0].speech.feature_dim
    torch.manual_seed(seed)
    scorer = SyncDiscriminator(speech_dim=feature_dim, model_dim=model_dim)
    opt = torch.optim.Adam(scorer.parameters(), lr=lr)
    bce = torch.nn.BCEWithLogitsLoss()
    for step in range(steps):
        rng = np.random.default_rng([seed, step])
        logits, labels = [], []
        for _ in range(batch_size):
            record = records[int(rng.integers(len(records)))]
            frames = record.expression.num_frames
            start = int(rng.integers(frames - WINDOW_FRAMES + 1))
            y = torch.from_numpy(
                record.expression.frames[start:start + WINDOW_FRAMES].copy())
            x = torch.from_numpy(
                record.speech.frames[RATE_RATIO * start:
                                       RATE_RATIO * (start + WINDOW_FRAMES)]
                .copy())
            frame_scores, _ = scorer(y, x)
            logits.append(frame_scores)
            labels.append(torch.ones(WINDOW_FRAMES))
            shift = int(rng.integers(shift_min, shift_max + 1))
            if rng.random() < 0.5:
                shift = -shift
            shifted_scores, _ = scorer(torch.roll(y, shifts=shift, dims=0), x)
            logits.append(shifted_scores)
            labels.append(torch.zeros(WINDOW_FRAMES))
        loss = bce(torch.cat(logits), torch.cat(labels))
        opt.zero_grad()
        loss.backward()
        opt.step()
    scorer.eval()
    return scorer


def save_sync_scorer(path, scorer: SyncDiscriminator) -> None:
    arrays = state_dict_arrays(scorer, SCORER_PREFIX)
    arrays[SCORER_CONFIG_KEY] = pack_json(
        {"feature_dim": scorer.speech_proj.in_features,
         "model_dim": scorer.expr_proj.out_features})
    save_archive(path, arrays)


def load_sync_scorer(path) -> SyncDiscriminator:
    path = Path(path)
    if not path.is_file():
        raise MissingScorer(str(path))
    arrays = load_archive(path)
    if SCORER_CONFIG_KEY not in arrays:
        raise MissingScorer(f"{path}: no sync scorer in archive")
    cfg = unpack_json(arrays[SCORER_CONFIG_KEY])
    scorer = SyncDiscriminator(speech_dim=cfg["feature_dim"],
                               model_dim=cfg["model_dim"])
    load_state_arrays(scorer, arrays, SCORER_PREFIX)
    scorer.eval()
    return scorer


@torch.no_grad()
def sync_score(weights: np.ndarray, speech: np.ndarray,
               scorer: SyncDiscriminator) -> float:
    """Mean matched-pair confidence (sigmoid of frame logits) over windows."""
    scorer.eval()
    confidences = []
    frames = weights.shape[0]
    for start in range(0, frames - WINDOW_FRAMES + 1, WINDOW_FRAMES):
        y = torch.as_tensor(
            np.array(weights[start:start + WINDOW_FRAMES]),
            dtype=torch.float32)
        x = torch.as_tensor(
            np.array(speech[RATE_RATIO * start:
                            RATE_RATIO * (start + WINDOW_FRAMES)]),
            dtype=torch.float32)
        frame_scores, _ = scorer(y, x)
        confidences.append(torch.sigmoid(frame_scores).mean().item())
    if not confidences:
        raise ShapeMismatch(
            f"sequence shorter than one {WINDOW_FRAMES}-frame window")
    return float(np.mean(confidences))


# --- model evaluation -------------------------------------------------------

@torch.no_grad()
def reconstruct_record(model: SpeakStyleModel,
                       record: SampleRecord) -> np.ndarray:
    """Teacher-forced reconstruction of a full record, window by window.

    Style comes from the record's own expression track; ground-truth
    durations keep generated length equal to the ground-truth length.
    """
    model.eval()
    clip = torch.from_numpy(record.expression.frames.copy())
    style = model.extract_style(clip)
    outputs = []
    frames = record.expression.num_frames
    for start in range(0, frames - WINDOW_FRAMES + 1, WINDOW_FRAMES):
        win = torch.from_numpy(
            record.speech.frames[RATE_RATIO * start:
                                   RATE_RATIO * (start + WINDOW_FRAMES)]
            .copy())
        labels = record.alignment.frame_labels[
            RATE_RATIO * start:RATE_RATIO * (start + WINDOW_FRAMES)]
        _, durations = group_frames(labels)
        y_hat, _ = model.generate(win, style, durations_speech=durations,
                                  total_expr=WINDOW_FRAMES)
        outputs.append(y_hat.numpy())
    return np.concatenate(outputs, axis=0).astype(np.float32)


def evaluate_model(model: SpeakStyleModel, records: list[SampleRecord],
                   basis: BlendshapeBasis,
                   scorer: SyncDiscriminator | None = None) -> dict:
    """LVE/FID (and sync, when a scorer is given) over full test records."""
    real_seqs, gen_seqs = [], []
    real_windows, gen_windows = [], []
    sync_values = []
    for record in records:
        frames = record.expression.num_frames
        usable = (frames // WINDOW_FRAMES) * WINDOW_FRAMES
        if usable == 0:
            continue
        truth = record.expression.frames[:usable]
        generated = reconstruct_record(model, record)[:usable]
        real_seqs.append(truth)
        gen_seqs.append(generated)
        real_windows.extend(sequence_windows(truth))
        gen_windows.extend(sequence_windows(generated))
        if scorer is not None:
            sync_values.append(sync_score(
                generated, record.speech.frames[:RATE_RATIO * usable],
                scorer))
    if not real_seqs:
        raise TooFewSamples("no record spans a full evaluation window")
    result = {
        "lve": lve(real_seqs, gen_seqs, basis),
        "fid": fid(window_features(real_windows), window_features(gen_windows)),
    }
    if scorer is not None:
        result["sync"] = float(np.mean(sync_values))
    return result


def evaluate_checkpoint(checkpoint_path, records: list[SampleRecord],
                        basis: BlendshapeBasis | None = None,
                        scorer_path=None) -> dict:
    model, _ = load_model(checkpoint_path)
    basis = basis if basis is not None else synthetic_basis()
    scorer = load_sync_scorer(scorer_path) if scorer_path else None
    return evaluate_model(model, records, basis, scorer)


def run_ablation(records: list[SampleRecord],
                 variant_checkpoints: dict[str, str],
                 out_csv, basis: BlendshapeBasis | None = None,
                 scorer_path=None) -> list[dict]:
    """Evaluate the five-variant checkpoint set into a CSV report."""
    missing = [v for v in REQUIRED_VARIANTS if v not in variant_checkpoints]
    if missing:
        raise MissingVariant(f"missing variants: {missing}")
    basis = basis if basis is not None else synthetic_basis()
    scorer = load_sync_scorer(scorer_path) if scorer_path else None
    rows = []
    for variant in REQUIRED_VARIANTS:
        model, _ = load_model(variant_checkpoints[variant])
        metrics = evaluate_model(model, records, basis, scorer)
        rows.append({"variant": variant, **metrics})
    with open(out_csv, "w", newline="") as fh:
        fields = ["variant", "lve", "fid"] + (["sync"] if scorer else [])
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return rows


# --- style embedding export -------------------------------------------------

@torch.no_grad()
def collect_style_vectors(model: SpeakStyleModel,
                          records: list[SampleRecord]):
    """Style vector per non-overlapping window, with identity/emotion labels."""
    model.eval()
    vectors, identities, emotions = [], [], []
    for record in records:
        for window in sequence_windows(record.expression.frames):
            w = model.encode_style(torch.from_numpy(window.copy()))
            vectors.append(w.numpy())
            identities.append(record.identity_id)
            emotions.append(record.emotion_id)
    return (np.stack(vectors), np.asarray(identities, dtype=np.int64),
            np.asarray(emotions, dtype=np.int64))


@torch.no_grad()
def collect_content_codes(model: SpeakStyleModel,
                          records: list[SampleRecord],
                          frame_stride: int = 6, pooled: bool = False):
    """Content codes with identity labels.

    ``pooled`` yields one time-averaged code per window, the granularity the
    disentanglement objective acts on; otherwise per-frame codes are
    subsampled every ``frame_stride`` frames.
    """
    model.eval()
    codes, identities = [], []
    for record in records:
        for window in sequence_windows(record.expression.frames):
            content = model.expression_encoder.encode_content(
                torch.from_numpy(window.copy())).numpy()
            if pooled:
                codes.append(content.mean(axis=0))
                identities.append(record.identity_id)
                continue
            for t in range(0, content.shape[0], frame_stride):
                codes.append(content[t])
                identities.append(record.identity_id)
    return np.stack(codes), np.asarray(identities, dtype=np.int64)


def pca_2d(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


def export_style_embeddings(model: SpeakStyleModel,
                            records: list[SampleRecord], out_csv) -> int:
    """One CSV row per window: identity, emotion, style dims, 2-D PCA."""
    vectors, identities, emotions = collect_style_vectors(model, records)
    coords = pca_2d(vectors)
    dims = vectors.shape[1]
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identity", "emotion"]
                        + [f"w_{i:03d}" for i in range(dims)]
                        + ["pca_x", "pca_y"])
        for i in range(vectors.shape[0]):
            emotion = EMOTIONS[emotions[i]] if 0 <= emotions[i] < len(EMOTIONS) \
                else str(emotions[i])
            writer.writerow([identities[i], emotion]
                            + [repr(float(v)) for v in vectors[i]]
                            + [repr(float(coords[i, 0])),
                               repr(float(coords[i, 1]))])
    return int(vectors.shape[0])

import numpy as np
import pytest

from speakstyle import datamodel as dm
from speakstyle import duration
from speakstyle import synthdata


def test_generator_validation():
    with pytest.raises(ValueError):
        synthdata.CorpusGenerator(seed=0, num_identities=1)


def test_corpus_shape_and_labels(small_corpus):
    assert len(small_corpus) == 24
    identities = {r.identity_id for r in small_corpus}
    emotions = {r.emotion_id for r in small_corpus}
    assert identities == set(range(4))
    assert emotions == set(range(6))
    for r in small_corpus:
        assert r.expression.num_frames == 96
        assert r.speech.num_frames == 384
        assert r.alignment.total_frames == 384
        assert r.expression.frames.min() >= 0.0
        assert r.expression.frames.max() <= 1.0


def test_corpus_deterministic():
    a = synthdata.generate_corpus(seed=5, samples_per_cell=1,
                                  frames_per_sample=48)
    b = synthdata.generate_corpus(seed=5, samples_per_cell=1,
                                  frames_per_sample=48)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.expression.frames,
                                      rb.expression.frames)
        np.testing.assert_array_equal(ra.speech.frames, rb.speech.frames)
        assert ra.alignment.durations == rb.alignment.durations


def test_corpus_seed_changes_data():
    a = synthdata.generate_corpus(seed=5, samples_per_cell=1,
                                  frames_per_sample=48)
    b = synthdata.generate_corpus(seed=6, samples_per_cell=1,
                                  frames_per_sample=48)
    assert not np.array_equal(a[0].expression.frames, b[0].expression.frames)


def test_identity_styles_differ():
    gen = synthdata.CorpusGenerator(seed=0)
    s0 = gen.ground_truth_style(0, 0)
    s1 = gen.ground_truth_style(1, 0)
    assert not np.allclose(s0.gain, s1.gain)


def test_neutral_emotion_has_zero_offset():
    gen = synthdata.CorpusGenerator(seed=0)
    style = gen.ground_truth_style(0, 0)
    np.testing.assert_array_equal(style.emotion_offset, np.zeros(41))
    angry = gen.ground_truth_style(0, 1)
    # emotion offsets touch only upper-face weights
    lower = [i for i in range(41) if i not in dm.UPPER_FACE_INDICES]
    np.testing.assert_array_equal(angry.emotion_offset[lower],
                                  np.zeros(len(lower)))
    assert np.abs(angry.emotion_offset[list(dm.UPPER_FACE_INDICES)]).max() > 0


def test_lips_follow_phonemes(small_corpus):
    """Lip weights track the enveloped per-phoneme targets up to noise."""
    rec = small_corpus[0]
    gen = synthdata.CorpusGenerator(seed=0, samples_per_cell=1,
                                    frames_per_sample=96)
    style = gen.ground_truth_style(rec.identity_id, rec.emotion_id)
    extents = duration.rate_convert(rec.alignment.durations, total=96)
    labels_25 = np.repeat(np.asarray(rec.alignment.phonemes), extents)
    envelope = synthdata.articulation_envelope(extents)
    lip_cols = list(dm.LIP_INDICES)
    expected = (style.gain[lip_cols]
                * gen.lip_targets[labels_25] * envelope[:, None]
                + style.bias[lip_cols])
    expected = np.clip(expected, 0.0, 1.0)
    err = np.abs(rec.expression.frames[:, lip_cols] - expected)
    assert err.max() < 0.12  # noise_std=0.02, clipping absorbs the tails


def test_articulation_envelope_shape():
    env = synthdata.articulation_envelope([4, 1])
    assert env.shape == (5,)
    # a length-4 run peaks in the middle and stays above the floor
    run = env[:4]
    assert run.min() >= synthdata.ARTICULATION_FLOOR
    assert run.argmax() in (1, 2)
    assert np.isclose(env[4], 1.0)  # single-frame run sits at the peak


def test_speech_features_noisy_but_poolable(small_corpus):
    """Per-frame features are ambiguous; extent-pooled means are not."""
    rec = small_corpus[0]
    gen = synthdata.CorpusGenerator(seed=0)
    labels = rec.alignment.frame_labels
    feats = rec.speech.frames
    residual = feats - gen.phoneme_embeddings[labels]
    assert abs(residual.std() - synthdata.SPEECH_NOISE_STD) < 0.05
    hits = 0
    start = 0
    for p, d in zip(rec.alignment.phonemes, rec.alignment.durations):
        pooled = feats[start:start + d].mean(axis=0)
        dist = np.linalg.norm(gen.phoneme_embeddings - pooled, axis=1)
        hits += int(dist.argmin() == p)
        start += d
    assert hits / len(rec.alignment.phonemes) > 0.9


def test_write_corpus_layout(tmp_path, small_corpus):
    manifest = synthdata.write_corpus(small_corpus[:2], tmp_path / "c")
    assert manifest.name == "manifest.jsonl"
    names = sorted(p.name for p in (tmp_path / "c").iterdir())
    assert "sample_0000.expr.csv" in names
    assert "sample_0000.speech.bin" in names
    assert "sample_0000.align.tsv" in names
    assert len(manifest.read_text().splitlines()) == 2

"""Personalized speech-driven 3D facial expression synthesis.

The package turns per-frame speech embeddings into blendshape weight
sequences whose speaking style is controlled by a compact vector
extracted from a short reference clip of the target person.
"""

from .datamodel import (EXPRESSION_FPS, NUM_BLENDWEIGHTS, NUM_PHONEMES,
                        RATE_RATIO, SPEECH_FPS, WINDOW_FRAMES,
                        BlendweightSequence, PhonemeAlignment, SampleRecord,
                        SpeechFeatureSequence, load_blendweights,
                        load_manifest, load_speech_features,
                        load_style_vector, save_blendweights,
                        save_speech_features, save_style_vector,
                        window_sample)
from .errors import SpeakStyleError
from .evaluation import evaluate_model, fid, lve, sync_score
from .model import (ModelConfig, SpeakStyleModel, load_model, save_model,
                    synthesize_sequence)
from .training import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "EXPRESSION_FPS",
    "NUM_BLENDWEIGHTS",
    "NUM_PHONEMES",
    "RATE_RATIO",
    "SPEECH_FPS",
    "WINDOW_FRAMES",
    "BlendweightSequence",
    "ModelConfig",
    "PhonemeAlignment",
    "SampleRecord",
    "SpeakStyleError",
    "SpeakStyleModel",
    "SpeechFeatureSequence",
    "TrainConfig",
    "Trainer",
    "evaluate_model",
    "fid",
    "load_blendweights",
    "load_manifest",
    "load_model",
    "load_speech_features",
    "load_style_vector",
    "lve",
    "save_blendweights",
    "save_model",
    "save_speech_features",
    "save_style_vector",
    "sync_score",
    "synthesize_sequence",
    "window_sample",
    "__version__",
]

import numpy as np
import pytest
import torch

from speakstyle import synthdata
from speakstyle.model import ModelConfig, SpeakStyleModel

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    """24 samples: 4 identities x 6 emotions, 96 expression frames each."""
    return synthdata.generate_corpus(seed=0, samples_per_cell=1,
                                     frames_per_sample=96)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(model_dim=32, style_dim=16, feature_dim=24,
                       encoder_layers=1, decoder_layers=1, heads=2)


@pytest.fixture()
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return SpeakStyleModel(tiny_config).eval()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import _report
    if _report.LINES:
        terminalreporter.section("acceptance verdicts")
        for line in _report.LINES:
            terminalreporter.write_line(line)

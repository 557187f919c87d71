"""Test configuration and fixtures."""

import numpy as np
import pytest

from config.settings import Config, LdaSettings, SynthConfig, TrainConfig
from src.dataio import Dataset, FeatureDims, synth_generate
from src.network import init_params
from tests.helpers import make_sample


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_log_file(tmp_path, monkeypatch):
    """Keep CLI log files out of the working tree."""
    monkeypatch.setattr(Config, "LOG_FILE", str(tmp_path / "logs" / "test.log"))


@pytest.fixture
def small_dims():
    return FeatureDims(d_t=4, d_a=3, d_v=3)


@pytest.fixture
def sample(small_dims):
    """One random sample with the gradient-check shapes."""
    return make_sample(np.random.default_rng(7), dims=small_dims)


@pytest.fixture
def small_params(small_dims):
    return init_params(small_dims, hidden_size=5, topics_K=3, seed=3)


@pytest.fixture
def tiny_dataset(small_dims):
    """Twelve random samples carrying short supervisory documents."""
    rng = np.random.default_rng(11)
    words = ["calm", "listen", "trust", "fear", "anger", "hope"]
    samples = [
        make_sample(
            rng,
            f"d{i:02d}",
            small_dims,
            (int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3))),
            level=i % 3,
            doc=list(rng.choice(words, size=6)),
        )
        for i in range(12)
    ]
    return Dataset(samples, small_dims)


@pytest.fixture
def fast_config():
    """A TrainConfig small enough for unit tests."""
    return TrainConfig(
        epochs=2,
        batch_size=4,
        hidden_size=4,
        topics_K=2,
        seed=0,
        lda=LdaSettings(sweeps=20),
    )


@pytest.fixture
def unimodal_data():
    return synth_generate(SynthConfig(task="unimodal-linear", n=60), seed=1)


@pytest.fixture
def topic_data():
    return synth_generate(SynthConfig(task="topic-correlated", n=60, doc_length=30), seed=2)

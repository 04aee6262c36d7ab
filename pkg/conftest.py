import numpy as np
import pytest

from data import Annotation, SyntheticSpec
from model import GroundingModel, ModelConfig
from training import LossWeights, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    # scales (2, 4) over M=2 layers -> radii (4, 2)
    return ModelConfig(D=8, heads=2, enc_layers=1, M=2, anchor_scales=(2, 4), feature_dim=4,
                       vocab_size=10, max_T=16, max_L=6, ffn_mult=2, head_hidden=8)


@pytest.fixture
def tiny_model(tiny_config):
    return GroundingModel(tiny_config, seed=0)


@pytest.fixture
def tiny_sample():
    features = np.random.default_rng(7).normal(size=(12, 4))
    return features, Annotation("q_00000", "vid_00000", [1, 2, 3], 3.0, 7.0, 12)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(learning_rate=1e-2, batch_size=2, steps=3, N=6, N_pos=2,
                       weights=LossWeights(mu=1.0, lam=0.1))


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(T=12, F=4, vocab_size=10, snr_range=(0.2, 0.4), query_len=(2, 4), seed=3)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the full desk-scale training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full desk-scale training run (minutes on one core)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)

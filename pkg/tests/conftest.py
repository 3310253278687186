import numpy as np
import pytest

from ssdg.synthgen import SynthConfig, generate
from ssdg.trainer import TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow trend tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth_config():
    return SynthConfig(num_classes=3, num_domains=3, feature_dim=6, samples_per_class_per_domain=20, seed=1)


@pytest.fixture(scope="session")
def small_dataset(small_synth_config):
    return generate(small_synth_config)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        epochs=2,
        steps_per_epoch=3,
        labeled_batch=4,
        labels_per_class=3,
        hidden_layers=(8,),
        proj_dim=4,
        final_epochs=5,
    )

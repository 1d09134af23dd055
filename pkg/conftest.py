# conftest.py
import numpy as np
import pytest

from discriminator import DiscriminatorConfig
from generator import GeneratorConfig
from stereo_data import CostConfig, planar_scene, synth_scene


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the end-to-end smoke training")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: minutes-long end-to-end runs (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cost_cfg():
    return CostConfig()


@pytest.fixture
def plane():
    """16x16 textured plane at disparity 2, d_max 4."""
    return planar_scene(seed=3, h=16, w=16, d_max=4, disparity=2)


@pytest.fixture
def scene():
    return synth_scene(seed=5, h=16, w=16, d_max=4, n_layers=2)


@pytest.fixture
def tiny_gen_cfg():
    return GeneratorConfig(base_channels=4, sigma=0.05, k=3, d_max=4)


@pytest.fixture
def tiny_disc_cfg():
    return DiscriminatorConfig(feat_channels=4, head_depth=2)

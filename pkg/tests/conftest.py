"""Shared fixtures: seeded generators, small model configs and the --runslow switch."""
import numpy as np
import pytest

from src.config import BackboneConfig, ModelConfig, RefinerConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running test (enable with --runslow)")


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


def small_model_config(window=4, iters=2, kind="convnext_main"):
    """A model small enough to run a few windows in a test."""
    if kind == "basic_tiny":
        backbone = BackboneConfig(kind="basic_tiny", feature_dim=8, block_depths=(1, 1, 1), stage_dims=(8, 8, 8))
    else:
        backbone = BackboneConfig(feature_dim=16, block_depths=(1, 1, 1), stage_dims=(8, 8, 16))
    return ModelConfig(
        backbone=backbone,
        refiner=RefinerConfig(
            n_blocks=1, kernel=3, heads=2, expansion=2, corr_radius=1, corr_levels=2, iters=iters,
            width=8, hidden_dim=8, corr_dims=(8, 8), motion_dims=(4, 4), merge_dim=4,
        ),
        window=window,
    )


@pytest.fixture
def small_config():
    return small_model_config()

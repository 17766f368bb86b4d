"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from focalmix import DetectorConfig, LevelSpec, build_anchor_grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_grid():
    """16-cube patch with the two desk anchor levels (576 anchors)."""
    return build_anchor_grid((16, 16, 16), [LevelSpec(2, 4.0), LevelSpec(4, 8.0)])


@pytest.fixture(scope="session")
def desk_grid():
    """The default 32-cube anchor grid (4608 anchors)."""
    return DetectorConfig().anchor_grid()


@pytest.fixture(scope="session")
def tiny_model_config():
    """Smallest legal detector, for gradient checks and fast training."""
    return DetectorConfig(
        input_patch=(8, 8, 8), stage_channels=(3, 4, 5), fpn_channels=4, weight_init_seed=7
    )

"""
Shared fixtures for lmreg tests
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from lmreg.config import ExperimentConfig, NetworkConfig
from lmreg.deform_sim import make_phantom
from lmreg.volume import GridGeometry


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def geometry():
    """Small isotropic grid, 2 mm voxels"""
    return GridGeometry((24, 24, 24), (2.0, 2.0, 2.0), (0.0, 0.0, 0.0))


@pytest.fixture
def phantom(geometry):
    return make_phantom(geometry, np.random.default_rng(7))


@pytest.fixture
def small_net():
    """Two-level matcher small enough for fast forward/backward passes"""
    return NetworkConfig(levels=2, base_channels=2, K=8, patch_dims=(8, 8, 8))


@pytest.fixture
def small_config(small_net):
    return ExperimentConfig(net=small_net)

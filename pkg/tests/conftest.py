import numpy as np
import pytest
import torch

from handsplat.kinematics import canonical_skeleton
from handsplat.synth import build_assets

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def canonical():
    return canonical_skeleton()


@pytest.fixture(scope="session")
def small_assets():
    """Capsule hand with 30 Gaussians per bone and a coarse weight field."""
    return build_assets(n_per_bone=30, seed=0, field_resolution=24)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import numpy as np
import pytest
import torch

from saliencytune.backend import build_reference_cnn
from saliencytune.data import generate_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def backend32():
    return build_reference_cnn(seed=7)


@pytest.fixture
def backend64():
    # float64 keeps finite-difference and bit-identity checks clean
    return build_reference_cnn(seed=7, dtype=torch.float64)


@pytest.fixture(scope="session")
def synth60():
    return generate_synthetic_dataset(60, seed=3)


@pytest.fixture
def image32(rng):
    return rng.uniform(0.0, 1.0, size=(32, 32, 3)).astype(np.float32)

import numpy as np
import pytest
import torch

from hltp.data import SyntheticConfig, generate_synthetic_scenes
from hltp.training import featurize, with_labels


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def scenes():
    return generate_synthetic_scenes(SyntheticConfig.balanced(18), seed=3)


@pytest.fixture(scope="session")
def noisy_scenes():
    return generate_synthetic_scenes(SyntheticConfig.balanced(9, noise=0.05), seed=4)


def batch_of(scenes, frames, dtype=torch.float32):
    return featurize(with_labels(scenes), frames).to_torch(dtype)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))

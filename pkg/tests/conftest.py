import numpy as np
import pytest

from crcseg import data
from crcseg.model import ModelConfig


@pytest.fixture(scope="session")
def tiny_dataset():
    # 8 categories keep fold construction valid while staying fast
    return data.generate_synthetic_dataset(8, 6, 32, seed=11)


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return ModelConfig(channels=8, enc_channels=(4, 8, 8), refine_iterations=2)


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)

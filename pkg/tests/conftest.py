import numpy as np
import pytest
import torch

from owseg.shapeworld import ShapeworldConfig, generate_dataset


@pytest.fixture(scope="session")
def small_dataset():
    """100 train / 30 test scenes with the default 6/4/4 taxonomy."""
    cfg = ShapeworldConfig(seed=7)
    taxonomy, train, test = generate_dataset(cfg, 100, 30)
    return cfg, taxonomy, train, test


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_determinism():
    torch.manual_seed(0)

import os
from pathlib import Path

import numpy as np
import pytest

from domain.network import build_mlp
from domain.tensor import Rng
from tests.helpers import write_idx_dataset


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(7)


@pytest.fixture
def small_mlp(rng):
    return build_mlp([6, 5, 4, 3], rng, activation="elu", dtype=np.float64)


@pytest.fixture
def one_hot_batch():
    labels = np.array([0, 2, 1, 2, 0])
    y = np.zeros((5, 3))
    y[np.arange(5), labels] = 1.0
    return labels, y


@pytest.fixture
def tiny_data_root(tmp_path):
    return write_idx_dataset(tmp_path / "data")


@pytest.fixture
def data_root():
    root = os.environ.get("CCL_DATA_ROOT")
    if not root or not Path(root).exists():
        pytest.skip("CCL_DATA_ROOT not set or missing")
    return Path(root)

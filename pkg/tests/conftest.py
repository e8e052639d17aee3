import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from film_denoise.data import make_cifar_corpus
from film_denoise.model import ModelConfig, build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory) -> Path:
    """A small synthetic corpus in CIFAR-10 binary layout (160 records)."""
    d = tmp_path_factory.mktemp("cifar")
    make_cifar_corpus(d, n_records=160, seed=41)
    return d


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(input_shape=(3, 16, 16), depth=2, base_channels=4,
                       conditioner_hidden=(4,), seed=7)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build(tiny_config)

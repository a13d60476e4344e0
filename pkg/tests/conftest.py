import numpy as np
import pytest

from dynts.synthdata import TaskParams, gen_dataset
from dynts.toymodel import ModelConfig, build_planted_model, planted_config


@pytest.fixture(scope="session")
def task():
    return TaskParams()


@pytest.fixture(scope="session")
def planted(task):
    return build_planted_model(task, planted_config(task))


@pytest.fixture(scope="session")
def small_cfg(task):
    return ModelConfig(n_layers=2, n_heads=2, d_model=32, vocab_size=task.vocab.size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

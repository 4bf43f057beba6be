import numpy as np
import pytest

from repre import tensor as T
from repre.pipeline.config import TrainConfig


def tiny_config(**kw) -> TrainConfig:
    """A model small enough for many training steps per test."""
    base = dict(image_size=16, patch_size=4, depth=5, width=16, heads=2, taps=4,
                decoder_width=8, proj_hidden=32, proj_dim=16, pred_hidden=32,
                queue_size=16, dataset_size=24, batch_size=4, steps=6, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

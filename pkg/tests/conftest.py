import numpy as np
import pytest

from modalfuse.encoder import EncoderConfig, init_params
from modalfuse.tensor import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def tiny_encoder():
    """Two stages, stride 2, 8x8 inputs."""
    return EncoderConfig(num_classes=3, num_stages=2, channels_per_stage=(4, 8), stage_stride=2)


@pytest.fixture
def tiny_params(tiny_encoder):
    return init_params(tiny_encoder, seed=7)


import numpy as np
import pytest

from diffusese.sde import SdeParams


@pytest.fixture
def sde():
    return SdeParams()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import numpy as np
import pytest

from derevm import UpaConfig


@pytest.fixture
def desk():
    return UpaConfig.desk()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

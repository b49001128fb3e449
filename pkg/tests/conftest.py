import numpy as np
import pytest

from covidnn.models import Network, build_proposed_cnn
from covidnn.tensor import seeded_rng


@pytest.fixture
def rng():
    return seeded_rng(1234)


@pytest.fixture
def small_cnn():
    """Proposed CNN shrunk to 12x12 inputs so tests stay fast."""
    return Network(build_proposed_cnn(fc_hidden=4, input_size=12), seeded_rng(7))


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)

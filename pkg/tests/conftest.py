import numpy as np
import pytest

from refiner.tensor import set_debug_checks


@pytest.fixture(autouse=True)
def debug_checks():
    """NaN/Inf assertions on for every test unless a test opts out."""
    prev = set_debug_checks(True)
    yield
    set_debug_checks(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

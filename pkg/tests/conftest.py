import numpy as np
import pytest

from glamseg.tensor import precision


@pytest.fixture
def f64():
    with precision("checking"):
        yield


@pytest.fixture
def rs():
    return np.random.default_rng(1234)

import numpy as np
import pytest

from roicodec.operators.tensor_core.api import dtype_scope


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with dtype_scope(np.float64):
        yield

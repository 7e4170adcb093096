import numpy as np
import pytest

from evotrain import runtime


@pytest.fixture(autouse=True)
def fresh_context():
    runtime.set_context(runtime.Context())
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)

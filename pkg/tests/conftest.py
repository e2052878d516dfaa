import numpy as np
import pytest

from reflect.model import canonical_model


@pytest.fixture(scope="session")
def cyl():
    return canonical_model(0.0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)

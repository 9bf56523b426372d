import numpy as np
import pytest

from leapvid import autodiff as ad


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

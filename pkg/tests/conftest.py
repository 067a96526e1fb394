import numpy as np
import pytest

from fedsim.core import ParamVector


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(rng, dim=6):
    return ParamVector(rng.standard_normal(dim))

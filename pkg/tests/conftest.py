import math

import numpy as np
import pytest

from perelman_lab.geometry import ConformalTorus


def bumpy_torus(N=32, a=0.1, b=0.05):
    return ConformalTorus.from_function(lambda x, y: a * np.sin(x) + b * np.cos(y), N)


@pytest.fixture
def torus32():
    return bumpy_torus(32)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def order(e_coarse, e_fine, ratio=2.0):
    return math.log(abs(e_coarse) / abs(e_fine)) / math.log(ratio)

import numpy as np
import pytest

from ectk.data import stairstep


@pytest.fixture
def stair3():
    return np.array([[1, 1, 1], [1, 1, 0], [1, 0, 0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_binary(rng, shape, density=0.5):
    """Random 0/1 matrix with no empty rows or columns."""
    while True:
        m = (rng.random(shape) < density).astype(int)
        if m.sum(axis=0).all() and m.sum(axis=1).all():
            return m


@pytest.fixture
def stair30():
    return stairstep(30, 30)

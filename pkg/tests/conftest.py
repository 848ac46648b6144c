import numpy as np
import pytest

from softmax_ntk.model import Dataset, NetworkState, random_dataset, sample_unit_ball


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_instance(rng, n, d, m, sigma=1.0, d2=None):
    """Random data and a network with generic (non-symmetric) weights."""
    d2 = d if d2 is None else d2
    data = Dataset(sample_unit_ball(rng, d, n), sample_unit_ball(rng, d2, n))
    net = NetworkState(sigma * rng.standard_normal((d, m)), rng.choice([-1.0, 1.0], size=(d2, m)))
    return data, net


@pytest.fixture
def small_instance(rng):
    return random_instance(rng, n=5, d=3, m=12)


__all__ = ["random_instance", "random_dataset"]

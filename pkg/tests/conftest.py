import numpy as np
import pytest

from swarguide.core import LogitTensor, VocabSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tensor(rng, h, w, v, scale=3.0):
    return LogitTensor(h, w, VocabSpec(v), rng.normal(0.0, scale, (h * w, v)))


def make_pair(rng, h, w, v, scale=3.0):
    return make_tensor(rng, h, w, v, scale), make_tensor(rng, h, w, v, scale)

import numpy as np
import pytest

from otdiff import _parallel


@pytest.fixture(autouse=True)
def _single_thread():
    # deterministic reductions
    _parallel.set_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return path

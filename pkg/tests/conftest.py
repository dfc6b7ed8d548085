import numpy as np
import pytest

from dect_extract import _backend


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run a test once per importable kernel backend."""
    prev = _backend.use(request.param)
    yield request.param
    _backend.use(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

import random

import pytest

from cryptocubic.backend import get_backend


@pytest.fixture(params=["symbolic", "concrete"])
def backend(request):
    return get_backend(request.param)


@pytest.fixture
def rng():
    return random.Random(0)

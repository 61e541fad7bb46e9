import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)


@pytest.fixture
def small_cloud(rng):
    """60 points in 4-d, enough for k up to 20 with several tree levels."""
    return rng.random((60, 4), dtype=np.float32)


@pytest.fixture
def medium_cloud(rng):
    return rng.random((4096, 6), dtype=np.float32)

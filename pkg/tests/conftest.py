import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def line3():
    """Corpus {(0,0),(1,0),(5,0)} used by several worked examples."""
    from madpr.embeddings import from_rows

    return from_rows([[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

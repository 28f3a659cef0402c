import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from reidbow.imgio import CameraShift, synthesize_dataset, synthetic_color_name_table

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def cn_table():
    return synthetic_color_name_table()


@pytest.fixture(scope="session")
def tiny_dataset():
    """Six identities, two cameras, one view each, at 64x24."""
    return synthesize_dataset(6, 1, CameraShift(0.03, 1.2, 4.0, 1), seed=5, size=(64, 24))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

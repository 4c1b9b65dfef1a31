import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from denseuv.shapes import compute_mean_shape
from denseuv.synthetic import ShapeSpec, make_dataset

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(ShapeSpec(), 40, 10, seed=3)


@pytest.fixture(scope="session")
def small_template(small_dataset):
    return compute_mean_shape([i.landmarks for i in small_dataset["train"]])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

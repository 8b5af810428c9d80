import numpy as np
import pytest

import scenes


@pytest.fixture(scope="session")
def model():
    return scenes.model(0)


@pytest.fixture(scope="session")
def tiny_model():
    return scenes.model(1, n_vertices=12, k_id=3, k_exp=2, k_alb=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

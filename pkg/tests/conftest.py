import warnings

import numpy as np
import pytest
from hypothesis import settings

from dampc.model import build_mass_spring_model, build_two_state_model, mass_spring_design, offline_design

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def two_state():
    model = build_two_state_model(T=60, N=8, N_theta=5)
    return model, offline_design(model, 0.96)


@pytest.fixture(scope="session")
def short_two_state():
    model = build_two_state_model(T=10, N=4, N_theta=3)
    return model, offline_design(model, 0.96)


@pytest.fixture(scope="session")
def mass_spring():
    model = build_mass_spring_model(T=20, N=6, N_theta=4)
    return model, mass_spring_design(model)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _no_warning_noise():
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        yield

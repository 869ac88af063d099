import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from robust2bsde import uncertain_volatility_family

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

UVM_SIGMAS = [0.10, 0.15, 0.20, 0.25, 0.30]


@pytest.fixture(scope="session")
def uvm():
    return uncertain_volatility_family(UVM_SIGMAS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

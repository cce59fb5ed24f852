import numpy as np
import pytest

from adexpo.env import GenConfig, generate_day


@pytest.fixture(scope="session")
def tiny_gen_cfg():
    """Few requests, full-width candidates (feature layout unchanged)."""
    return GenConfig(requests_per_hour=5, hours=4, peak_hours=(1, 2))


@pytest.fixture(scope="session")
def tiny_day(tiny_gen_cfg):
    return generate_day(tiny_gen_cfg, seed=7)


@pytest.fixture(scope="session")
def full_day():
    return generate_day(GenConfig(), seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)

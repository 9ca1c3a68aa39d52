import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from inferlab.model import ModelConfig, init_params

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def params():
    return init_params(ModelConfig())


@pytest.fixture(scope="session")
def tiny():
    return init_params(ModelConfig(vocab_size=8, num_layers=2, d_model=8, num_q_heads=2, num_kv_heads=1,
                                   d_ff=8, max_seq=16, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

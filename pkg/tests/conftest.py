import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from ndcr.datagen import GenConfig, generate  # noqa: E402
from ndcr.model import ModelConfig, build_params, collate  # noqa: E402

settings.register_profile("ndcr", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("ndcr")


@pytest.fixture(scope="session")
def small_gen():
    return GenConfig(d=16, L=4, A=8, seed=3)


@pytest.fixture(scope="session")
def small_instances(small_gen):
    return generate(small_gen, 24)


@pytest.fixture(scope="session")
def small_model_cfg():
    return ModelConfig(d=16, max_props=10, max_candidates=4, heads=2, s2_heads=2, ffn_mult=2)


@pytest.fixture
def small_store(small_model_cfg):
    return build_params(small_model_cfg, np.float64)


@pytest.fixture
def small_batch(small_instances):
    return collate(small_instances[:6], np.float64)

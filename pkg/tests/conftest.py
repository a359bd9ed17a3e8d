import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from algorithms.sde_core import DiffusionModel, TimeGrid, identity_diffusion, zero_drift  # noqa: E402
from services.fixture_registry import FixtureRegistry  # noqa: E402
from utils.parallel import DEFAULT_CHUNK_SIZE, set_chunk_size, set_worker_count  # noqa: E402


@pytest.fixture(autouse=True)
def reset_parallel():
    """每个测试前后恢复单线程、默认分块"""
    set_worker_count(1)
    set_chunk_size(DEFAULT_CHUNK_SIZE)
    yield
    set_worker_count(1)
    set_chunk_size(DEFAULT_CHUNK_SIZE)


@pytest.fixture
def grid():
    return TimeGrid(1.0, 4, 8)


@pytest.fixture
def identity_model():
    return DiffusionModel(1, 1, zero_drift(1), identity_diffusion(1), 1.0, 0.5, ((-1.0,), (1.0,)), name="identity")


@pytest.fixture
def tanh_model():
    return DiffusionModel(1, 1, lambda x, u: u * np.tanh(x), identity_diffusion(1), 1.0, 0.5, ((-1.0,), (1.0,)),
                          name="tanh")


@pytest.fixture
def registry():
    return FixtureRegistry()


@pytest.fixture
def seed():
    return 1234


@pytest.fixture
def settings():
    """不读写用户持久化设置的设置管理器"""
    from services.settings import SettingsManager
    manager = SettingsManager()
    manager.settings = None
    return manager


@pytest.fixture
def runner(registry, settings):
    from services.experiment_runner import ExperimentRunner
    return ExperimentRunner(registry, settings)

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_env():
    from distreach.kinematics import preset_spec
    return preset_spec("scara3", horizon=16)


@pytest.fixture
def small_cfg():
    from distreach.ppo import PpoConfig
    return PpoConfig(horizon=16, min_steps_per_task=64, timesteps_per_batch=64, sgd_batchsize=32,
                     num_sgd_iter=2, hidden_sizes=(8,))


_VERDICTS: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number, ok, detail):
        _VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_VERDICTS[number])
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])

import os
import warnings

from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=400, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

import numpy as np
import pytest

from umigrat import data, models


@pytest.fixture(scope="session")
def small_natural():
    return data.sample_natural(data.DatasetSpec(count=400, shape=(8, 8), seed=11))


@pytest.fixture(scope="session")
def small_foundation(small_natural):
    cfg = models.ArchConfig(depth=3, width=24, embed_dim=16, input_shape=(8, 8), epochs=40, holdout=80)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return models.build_foundation(cfg, small_natural, seed=3)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])

import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nestdiff.data import DatasetSpec, generate

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_data():
    return generate(DatasetSpec(n_images=96, seed=3))


@pytest.fixture(scope="session")
def tiny_data():
    return generate(DatasetSpec(n_images=40, size=16, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

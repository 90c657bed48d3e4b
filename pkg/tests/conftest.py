from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from equitransport.domain import Box, CostSpec
from equitransport.randmeas import discretize_lebesgue, from_fractions

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("repo")


@pytest.fixture
def quadratic() -> CostSpec:
    return CostSpec(p=2.0)


@pytest.fixture
def linear() -> CostSpec:
    return CostSpec(p=1.0)


def unit_interval(k: int, K: int, level=1):
    return discretize_lebesgue(Box((0,), (1,)), k, level, K)


def atoms_1d(xs, weights, K):
    return from_fractions(np.asarray(xs, dtype=float)[:, None], weights, K)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

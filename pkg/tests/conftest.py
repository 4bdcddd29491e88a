import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# numba emits a one-off threading-layer notice on hosts without TBB
warnings.filterwarnings("ignore", message=".*TBB.*")


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def random_angles(rng, m, margin=0.1):
    return np.column_stack([
        rng.uniform(margin, np.pi - margin, m),
        rng.uniform(0.0, 2 * np.pi, m),
        rng.uniform(0.0, 4 * np.pi, m),
    ])


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

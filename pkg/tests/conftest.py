import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mpcno.geometry import CurveFamily, circle, discretize_curve, generate_random_curve

settings.register_profile("default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_cloud(rng):
    return discretize_curve(generate_random_curve(CurveFamily(), rng), 256)


@pytest.fixture
def unit_circle():
    return discretize_curve(circle(1.0), 512)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; assert afterwards."""

    def record(number, name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} ({name}): {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)

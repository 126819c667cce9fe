import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kolmofix.coeff import ExprField

settings.register_profile("kolmofix", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "kolmofix"))


@pytest.fixture
def ou_field():
    return ExprField("1", ["-x1"], m=1)


@pytest.fixture
def cubic_field():
    return ExprField("x1^2 * MOM(1, abs)^3", ["-2 * x1^3 * MOM(1, abs)"], m=0)


@pytest.fixture
def compact_field():
    return ExprField("max(0, 1 - abs(x1))", ["INT(2*y1) - x1"], m=0)


@pytest.fixture
def halfline_field():
    return ExprField("x1 * IND(x1 >= 0)", ["INT(2*y1) - x1"], m=0)


@pytest.fixture
def langevin_field():
    return ExprField({(0, 0): "1"}, ["-x1 - x2", "x1"], m=1, dim=2)


@pytest.fixture
def two_point():
    """Half mass at -1 and +1: first absolute moment 1."""
    return np.array([[-1.0], [1.0]]), np.array([0.5, 0.5])


# acceptance criteria report one line each; the lines are echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    def record(label, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

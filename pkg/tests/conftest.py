import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pudle.datagen import make_problem

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def orthonormal(m, seed=0):
    """Random orthogonal ``m x m`` matrix."""
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((m, m)))
    return q * np.sign(np.diag(r))


@pytest.fixture
def small_problem():
    return make_problem(10, 20, 30, 3, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(capsys):
    """Record one acceptance verdict line; it is printed immediately and again
    in the terminal summary."""
    def record(line):
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hjbq.env import EnvironmentSpec, make_lqr1d  # noqa: E402


@pytest.fixture
def env1d():
    return make_lqr1d()


@pytest.fixture
def still_env():
    """x' = 0 with the quadratic cost (A = 0, B = 0)."""
    return EnvironmentSpec([[0.0]], [[0.0]], gamma=0.1, M=1.0)


@pytest.fixture
def zero_cost_env():
    return make_lqr1d(cost_scale=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = {}


def record(number, title, ok, detail):
    """Store one acceptance verdict; printed at the end of the session."""
    VERDICTS[number] = (title, bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        title, ok, detail = VERDICTS[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number:>2}. {title}: {detail}")

import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Store a one-line verdict; printed immediately and again in the terminal summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, p, cond=50.0):
    Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    lam = np.geomspace(1.0, cond, p)
    return (Q * lam) @ Q.T


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import os

import numpy as np
import pytest

# criterion number -> (passed, summary line); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, line = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {k}: {line}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1

import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def shift_runs():
    """Single-split benchmark runs and their wall time in seconds."""
    from benchmark import single_split_runs

    t0 = time.perf_counter()
    runs = single_split_runs()
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def shift_cv():
    from benchmark import cv_shifted_accuracy

    return cv_shifted_accuracy()


def pytest_terminal_summary(terminalreporter):
    from benchmark import CRITERIA

    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])

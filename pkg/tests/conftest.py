import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conserva.model import make_preset  # noqa: E402


ACCEPT_KERNEL = {"const": 1.0, "terms": [(0.5, "cos", 1, -1)]}  # 1 + 0.5 cos(2 pi (u - v))


def accept_psi(u):
    return 0.5 + 0.25 * np.sin(2 * np.pi * u)


def cos_f(u):
    return np.cos(2 * np.pi * u)


@pytest.fixture(scope="session")
def exclusion():
    return make_preset("exclusion", kernel=ACCEPT_KERNEL)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the one-line verdict of an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])

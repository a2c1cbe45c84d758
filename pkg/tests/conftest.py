import numpy as np
import pytest
from hypothesis import settings

import cgraph.engine as E

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def double_precision():
    with E.default_dtype(np.float64):
        yield


_ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
        _ACCEPTANCE_LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[number])

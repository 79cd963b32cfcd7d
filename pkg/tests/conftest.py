import numpy as np
import pytest

_ACCEPTANCE: list[str] = []


def record_acceptance(line: str) -> None:
    print(line)
    _ACCEPTANCE.append(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)

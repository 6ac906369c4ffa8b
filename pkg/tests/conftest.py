import numpy as np
import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one acceptance line; the test still asserts on ``ok``."""

    def record(number, ok, detail, status=None):
        status = status or ("PASS" if ok else "FAIL")
        line = f"{status} criterion {number}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from amp import autodiff as ad


@pytest.fixture(autouse=True)
def _clean_tape():
    ad.reset_tape()
    yield
    ad.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0].lstrip("#"))):
            terminalreporter.write_line(line)

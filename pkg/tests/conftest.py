import numpy as np
import pytest

from backstep.numerics import Grid1D
from backstep.plant import chebyshev_beta


@pytest.fixture
def grid():
    return Grid1D.from_dx(1e-2)


@pytest.fixture
def cheb29(grid):
    return chebyshev_beta(grid, 2.9)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line, print it, then assert every check."""

    def record(number, title, checks):
        ok = all(passed for _, passed in checks)
        detail = "; ".join(text for text, _ in checks)
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        failed = [text for text, passed in checks if not passed]
        assert ok, f"criterion {number} failed: " + "; ".join(failed)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from fracnull.grid import Grid, GridFunction

#: (number, title, passed, detail) lines filled by the acceptance tests
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}: {detail}")


@pytest.fixture
def grid64():
    return Grid(1.0, 64)


@pytest.fixture
def mode_functions():
    """1, t, exp(-t), sin t as a four-mode function factory."""

    def make(grid):
        return GridFunction.from_callable(grid, [np.ones_like, lambda t: t, lambda t: np.exp(-t), np.sin])

    return make

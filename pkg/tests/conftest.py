import numpy as np
import pytest

from calcpheno import phantom as ph


@pytest.fixture(scope="session")
def small_phantom():
    """The standard layout on a 128^3 grid (20 um voxels)."""
    return ph.generate(ph.standard_spec(128, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from . import acceptance_log

    if not acceptance_log.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance_log.LINES):
        terminalreporter.write_line(acceptance_log.LINES[n])

import numpy as np
import pytest

from anchor_uq import _accel

BACKENDS = ["numpy"] + (["numba"] if _accel.NUMBA_AVAILABLE else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = _accel.backend()
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def toy_gap_data():
    """1-D regression set with a gap around zero."""
    x = np.concatenate([np.linspace(-1.0, -0.4, 10), np.linspace(0.4, 1.0, 10)])
    return x[:, None], (np.sin(3 * x) + 0.3 * x)[:, None]


# filled by test_acceptance.record, printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

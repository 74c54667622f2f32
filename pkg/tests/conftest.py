import numpy as np
import pytest

from switchgrid.chain import Grid, auto_steps
from switchgrid.model import Finite, Infinite, make_model


def two_mode_finite(psi1="min(x1,2)", psi2="min(-x1,2)", F=("1", "1"), g=0.5, sigma="0.3", T=1.0):
    return make_model(
        horizon=Finite(T), b=["0"], sigma=[[sigma]], psi=[psi1, psi2],
        g=[[None, g], [g, None]], F=list(F), alpha=0.5,
    )


def finite_grid(model, lo=-4.0, hi=4.0, n=41):
    steps = auto_steps(model, (lo,), (hi,), (n,))
    return Grid.finite((lo,), (hi,), (n,), model.horizon.T, steps)


def two_mode_infinite(psi1="1 + 0.5*tanh(x1)", psi2="1 - 0.5*tanh(x1)", g=0.4, F=("2", "3"), r=0.5):
    # H5 holds with alpha = 2.5: 1/alpha = 0.4 <= g <= alpha
    return make_model(
        horizon=Infinite(r), b=["-0.5*x1"], sigma=[["0.5"]], psi=[psi1, psi2],
        g=[[None, g], [g, None]], F=list(F), alpha=2.5,
    )


def infinite_grid(lo=-2.0, hi=2.0, n=21, dt=0.05):
    return Grid.infinite((lo,), (hi,), (n,), dt)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


# --- acceptance summary ------------------------------------------------------

@pytest.fixture(scope="session")
def acceptance_log(request):
    log = getattr(request.config, "_acceptance_lines", None)
    if log is None:
        log = request.config._acceptance_lines = []
    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)

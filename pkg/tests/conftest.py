import numpy as np
import pytest

from cdmseg.data_io import GaussianBlockSpec
from cdmseg.schedule import linear_schedule


def central_difference(f, x: np.ndarray, index, h: float = 1e-3) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h, perturbing ``x`` in place and restoring it."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def desk_schedule():
    """T=100 with betas scaled x10 so that Q=40 matches Q=400 at T=1000."""
    return linear_schedule(100, 1e-3, 0.2)


@pytest.fixture
def block_spec():
    return GaussianBlockSpec(height=16, width=16, block=(6, 6, 4, 4), delta=1.0, sigma0=0.1, sigma1=0.1)


@pytest.fixture
def f64():
    """Run the autodiff engine in float64 so central differences are meaningful."""
    from cdmseg.tensor import float64_mode

    with float64_mode():
        yield


def promote(module) -> None:
    for p in module.parameters():
        p.data = p.data.astype(np.float64)


ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{status:<4} {name}: {detail}")

import numpy as np
import pytest

from stochfiber.geometry import Grid
from stochfiber.model import FiberModel, ModelParams


def random_polygon(rng, grid, r0, size=(), spread=1.0):
    """Random on-manifold configuration: unit-length segments with random directions."""
    shape = tuple(np.atleast_1d(size)) if size != () else ()
    dirs = rng.normal(size=shape + (grid.N, grid.dim))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    # bias towards a hanging fiber so segments do not fold back too often
    dirs = dirs * spread + np.array([0.0, -1.0] + [0.0] * (grid.dim - 2))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return r0 + np.cumsum(grid.delta_s * dirs, axis=-2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid7():
    return Grid(7)


@pytest.fixture
def model7(grid7):
    return FiberModel(grid7, ModelParams())


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(label, ok, detail=""):
        line = f"{label}: {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)

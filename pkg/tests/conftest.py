import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", module="numba")

from h2cam.core import SpectralCube, WavelengthGrid  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid11():
    return WavelengthGrid.uniform()


def random_cube(rng, shape=(8, 8), grid=None):
    grid = WavelengthGrid.uniform() if grid is None else grid
    return SpectralCube(rng.random((*shape, grid.num_bands)) + 0.01, grid)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)

import sys

import numpy as np
import pytest

from exblurf.voxel import VoxelGrid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_grid(rng, dims=(16, 16, 16), dens_max=8.0, sh_scale=0.3, dtype=np.float64):
    grid = VoxelGrid.create(dims, (-1, -1, -1), (1, 1, 1), dtype=dtype)
    grid.density[:] = rng.uniform(0.0, dens_max, dims)
    grid.sh[:] = rng.normal(0.0, sh_scale, grid.sh.shape)
    return grid


def random_unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])

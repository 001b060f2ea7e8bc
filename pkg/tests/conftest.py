import os

import numpy as np
import pytest

from navtune.grid import OccupancyGrid


def pytest_collection_modifyitems(config, items):
    if os.environ.get("RUN_E2E") == "1":
        return
    skip = pytest.mark.skip(reason="long end-to-end run; set RUN_E2E=1 to enable")
    for item in items:
        if "e2e" in item.keywords:
            item.add_marker(skip)


def make_grid(cells, resolution=0.15, origin=(0.0, 0.0), start=None, goal=None):
    cells = np.asarray(cells, dtype=np.uint8)
    h, w = cells.shape
    return OccupancyGrid(width=w, height=h, resolution=resolution, cells=cells,
                        origin=origin, start=start, goal=goal)


def empty_grid(n=20, resolution=0.15, border=True):
    cells = np.zeros((n, n), dtype=np.uint8)
    if border:
        cells[0, :] = cells[-1, :] = 1
        cells[:, 0] = cells[:, -1] = 1
    return make_grid(cells, resolution=resolution)


@pytest.fixture
def rng():
    return np.random.default_rng(0)

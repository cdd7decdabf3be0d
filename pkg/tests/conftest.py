import numpy as np
import pytest

from recipnet.raster_io import LinkRecord, RasterGrid


def flat_grid(value=100.0, n=64, cell=4.0, x0=0.0, y0=0.0):
    return RasterGrid(n, n, x0, y0, cell, np.full((n, n), float(value)))


def random_scene_grids(seed, n=64, cell=4.0):
    """Smooth-ish random DTM with a DSM on top (DSM >= DTM)."""
    rng = np.random.default_rng(seed)
    base = 50 + np.cumsum(rng.normal(0, 0.3, (n, n)), axis=0) + np.cumsum(rng.normal(0, 0.3, (n, n)), axis=1)
    clutter = np.where(rng.random((n, n)) < 0.2, rng.uniform(3, 25, (n, n)), 0.0)
    return RasterGrid(n, n, 0.0, 0.0, cell, base), RasterGrid(n, n, 0.0, 0.0, cell, base + clutter)


def random_link(rng, lo=40.0, hi=216.0, tx_h=17.0, rx_h=1.5, freq=1802.0):
    while True:
        tx = rng.uniform(lo, hi, 2)
        rx = rng.uniform(lo, hi, 2)
        if np.hypot(*(rx - tx)) > 20:
            return LinkRecord(float(tx[0]), float(tx[1]), float(rx[0]), float(rx[1]),
                              tx_h, rx_h, freq, float(rng.uniform(80, 160)), "R", str(int(freq)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

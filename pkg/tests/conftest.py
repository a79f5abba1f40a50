import os

import numpy as np
import pytest

import fmsr.model.base
from fmsr import CONFIG
from fmsr.data.grid import Field, make_catalog, make_grid
from fmsr.data.regrid import make_coarsen_plan, make_upsample_plan
from fmsr.data.store import FieldStore
from fmsr.model.diffnet import ArchSpec, VelocityNet


@pytest.fixture(scope="session", autouse=True)
def execute_before_any_test():
    # Ensure that the production model directory is not touched in all tests
    CONFIG["fmsr"].update(CONFIG["fmsr_test"])
    fmsr.model.base.FMSR_MODEL_PATH = "models-test"
    os.makedirs("models-test", exist_ok=True)


@pytest.fixture(scope="session")
def hr_grid():
    return make_grid(12, 24)


@pytest.fixture(scope="session")
def lr_grid():
    return make_grid(4, 8)


@pytest.fixture(scope="session")
def catalog():
    return make_catalog([("t2m", "surface"), ("t", 850)])


@pytest.fixture(scope="session")
def plans(hr_grid, lr_grid):
    """(conservative hr -> lr, bicubic lr -> hr)"""
    return make_coarsen_plan(hr_grid, lr_grid), make_upsample_plan(lr_grid, hr_grid)


def smooth_data(grid, n_channels, seed=0, max_k=2):
    """Sum of a few low-wavenumber harmonics, well resolved on the coarse test grids."""
    rng = np.random.default_rng(seed)
    lat = np.deg2rad(grid.lat_centers)[:, None]
    lon = np.deg2rad(grid.lon_centers)[None, :]
    out = np.zeros((n_channels, grid.n_lat, grid.n_lon))
    for c in range(n_channels):
        out[c] += rng.normal()
        for k in range(1, max_k + 1):
            a, b, p = rng.normal(size=3)
            out[c] += (a * np.cos(k * lon) + b * np.sin(k * lon)) * np.cos(lat) ** k
            out[c] += p * np.sin(lat) ** k
    return out


@pytest.fixture
def make_field(catalog):
    def _make(grid, seed=0, timestamp=None, dtype=np.float64, max_k=2):
        data = smooth_data(grid, len(catalog), seed, max_k).astype(dtype)
        return Field(grid=grid, channels=catalog, data=data, timestamp=timestamp)

    return _make


@pytest.fixture
def tiny_arch():
    return ArchSpec(n_blocks=2, width=8, kernel=3, t_embed=4)


@pytest.fixture
def tiny_net(tiny_arch, catalog):
    return VelocityNet(tiny_arch, len(catalog), seed=0)


@pytest.fixture
def store(tmp_path):
    return FieldStore(str(tmp_path / "store"))

import numpy as np
import pytest

from image_core import Grid, Mask, VectorVolume, Volume, smooth_array


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="slow マーカーの試験も実行する")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="--runslow を指定すると実行")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def grid12():
    return Grid.from_spacing((12, 12, 12))


@pytest.fixture
def grid16():
    return Grid.from_spacing((16, 16, 16))


@pytest.fixture
def world_coordinates():
    """グリッドの全ボクセル中心のワールド座標 (nx, ny, nz, 3)"""
    def build(grid):
        index = np.stack(np.meshgrid(*[np.arange(d) for d in grid.dims], indexing="ij"), axis=-1)
        return grid.voxel_to_world(index.astype(np.float64))
    return build


@pytest.fixture
def smooth_image():
    """値域がおよそ [0, scale] の滑らかなランダム画像"""
    def build(grid, seed=0, sigma_mm=2.0, scale=100.0):
        noise = np.random.default_rng(seed).standard_normal(grid.dims)
        data = smooth_array(noise, grid.spacing, sigma_mm)
        data = (data - data.min()) / (data.max() - data.min()) * scale
        return Volume(data, grid)
    return build


@pytest.fixture
def smooth_field():
    """最大ノルム amplitude の滑らかなランダムベクトル場 (offset を各成分に加算)"""
    def build(grid, seed=0, amplitude=1.0, sigma_mm=3.0, offset=0.0):
        noise = np.random.default_rng(seed).standard_normal((*grid.dims, 3))
        data = smooth_array(noise, grid.spacing, sigma_mm)
        data *= amplitude / np.linalg.norm(data, axis=-1).max()
        return VectorVolume(data + offset, grid)
    return build


@pytest.fixture
def full_mask():
    return Mask.full

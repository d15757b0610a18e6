import cv2
import numpy as np
import pytest

from errors import ImageGridError
from image_core import Grid, Mask, Volume
from snapshot import OUTLINE_COLOR, SEPARATOR, render_snapshot


def _is_outline(canvas):
    return np.all(canvas == np.array(OUTLINE_COLOR, dtype=np.uint8), axis=-1)


@pytest.fixture
def volumes(grid12, rng):
    images = [Volume(rng.random(grid12.dims), grid12) for _ in range(2)]
    mean = Volume((images[0].data + images[1].data) / 2.0, grid12)
    return images, mean


def test_panels_side_by_side(tmp_path, grid12, volumes):
    images, mean = volumes
    path = tmp_path / "qc" / "snapshot.png"
    canvas = render_snapshot(images, mean, None, path, scale=3)

    assert canvas.shape == (36, 3 * 36 + 2 * SEPARATOR, 3)
    assert cv2.imread(str(path)).shape == canvas.shape
    assert not _is_outline(canvas).any()


def test_common_region_outline(tmp_path, grid12, volumes):
    images, mean = volumes
    region = np.zeros(grid12.dims, dtype=bool)
    region[3:9, 3:9, 3:9] = True
    canvas = render_snapshot(images, mean, Mask(region, grid12), tmp_path / "snapshot.png", scale=1)

    outline = _is_outline(canvas)
    assert outline[:, :12].any()
    assert not outline[:2, :12].any()


def test_grid_mismatch(tmp_path, grid12, volumes):
    images, mean = volumes
    other = Grid.from_spacing((10, 10, 10))
    with pytest.raises(ImageGridError):
        render_snapshot(images, mean, Mask.full(other), tmp_path / "snapshot.png")

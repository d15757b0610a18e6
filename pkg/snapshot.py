"""
品質確認用のスナップショット PNG

各ワープ済み画像と平均画像 Ī の中央アキシャル断面を横に並べ、
共通領域 H の輪郭を赤で重ねる。
"""

import logging
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from image_core import Mask, Volume, require_common_grid

logger = logging.getLogger(__name__)

OUTLINE_COLOR = (0, 0, 255)  # BGR
SEPARATOR = 4


def _to_uint8(slice_2d: np.ndarray, low: float, high: float) -> np.ndarray:
    if high <= low:
        return np.zeros(slice_2d.shape, dtype=np.uint8)
    scaled = (slice_2d - low) / (high - low) * 255.0
    return np.clip(scaled, 0, 255).astype(np.uint8)


def _axial(data: np.ndarray, k: int) -> np.ndarray:
    # 行 = y, 列 = x
    return np.ascontiguousarray(data[:, :, k].T)


def render_snapshot(
    images: Sequence[Volume],
    mean: Volume,
    common: Optional[Mask],
    path,
    scale: int = 3,
) -> np.ndarray:
    """
    スナップショットを描画して保存

    Args:
        images: ワープ済み画像
        mean: 平均画像
        common: 共通領域 H (None なら輪郭なし)
        path: 出力 PNG
        scale: 拡大率 (最近傍)

    Returns:
        描画した BGR 画像
    """
    grids = [v.grid for v in images] + [mean.grid] + ([common.grid] if common is not None else [])
    grid = require_common_grid(grids, "snapshot")
    k = grid.dims[2] // 2

    volumes = list(images) + [mean]
    low = min(float(v.data.min()) for v in volumes)
    high = max(float(v.data.max()) for v in volumes)

    contours = []
    if common is not None:
        outline = _axial(common.data, k).astype(np.uint8)
        contours, _ = cv2.findContours(outline, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)

    panels = []
    for volume in volumes:
        gray = _to_uint8(_axial(volume.data, k), low, high)
        panel = cv2.cvtColor(gray, cv2.COLOR_GRAY2BGR)
        if contours:
            cv2.drawContours(panel, contours, -1, OUTLINE_COLOR, 1)
        panel = cv2.resize(panel, None, fx=scale, fy=scale, interpolation=cv2.INTER_NEAREST)
        panels.append(panel)
        panels.append(np.full((panel.shape[0], SEPARATOR, 3), 255, dtype=np.uint8))
    canvas = np.hstack(panels[:-1])

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), canvas):
        logger.warning(f"スナップショットを保存できませんでした: {path}")
    else:
        logger.info(f"スナップショット: {path}")
    return canvas

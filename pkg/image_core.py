"""
ボリュームコンテナとサンプリング・平滑化・ピラミッド処理

全モジュールが共有する基本型 (Grid / Volume / Mask / VectorVolume) と、
純関数としてのカーネル群を提供する。

規約:
    - 配列の形状は (nx, ny, nz[, 3])、インデックス [i, j, k]。
      ファイルへの直列化は x-fastest (Fortran 順)。
    - 内部演算はすべて float64。
    - 境界はクランプ (エッジ複製)。ゼロ埋めはしない。
    - ベクトル場は物理単位 (mm) で保持する。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from errors import ImageGridError

logger = logging.getLogger(__name__)

SigmaLike = Union[float, Sequence[float]]


def _as_triplet(value: SigmaLike, name: str) -> Tuple[float, float, float]:
    if np.isscalar(value):
        triplet = (float(value),) * 3
    else:
        triplet = tuple(float(v) for v in value)
    if len(triplet) != 3:
        raise ImageGridError(f"{name} は 3 要素が必要です: {value}")
    return triplet


@dataclass(frozen=True, eq=False)
class Grid:
    """
    ボクセルグリッドのメタデータ

    Attributes:
        dims: 各軸のボクセル数 (nx, ny, nz)
        spacing: 各軸のボクセルサイズ [mm]
        affine: ボクセル -> ワールド座標の 4x4 行列
    """
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    affine: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = _as_triplet(self.spacing, "spacing")
        affine = np.array(self.affine, dtype=np.float64)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ImageGridError(f"dims は 3 軸とも 1 以上が必要です: {self.dims}")
        if any(not math.isfinite(s) or s <= 0 for s in spacing):
            raise ImageGridError(f"spacing は正の値が必要です: {self.spacing}")
        if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
            raise ImageGridError("affine は有限値の 4x4 行列が必要です")
        column_norms = np.linalg.norm(affine[:3, :3], axis=0)
        if not np.allclose(column_norms, spacing, rtol=1e-5, atol=1e-8):
            raise ImageGridError(
                f"affine の列ノルム {column_norms.tolist()} が spacing {spacing} と一致しません"
            )
        affine.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_spacing(
        cls,
        dims: Sequence[int],
        spacing: SigmaLike = 1.0,
        origin: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> "Grid":
        """軸平行なグリッドを作成"""
        spacing = _as_triplet(spacing, "spacing")
        affine = np.diag([*spacing, 1.0])
        affine[:3, 3] = origin
        return cls(tuple(dims), spacing, affine)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.dims

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def linear(self) -> np.ndarray:
        return self.affine[:3, :3]

    @property
    def inverse_linear(self) -> np.ndarray:
        return np.linalg.inv(self.linear)

    @property
    def extent(self) -> np.ndarray:
        """最初と最後のボクセル中心間の物理長 [mm]"""
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def voxel_to_world(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.linear.T + self.affine[:3, 3]

    def world_to_voxel(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.affine[:3, 3]) @ self.inverse_linear.T

    def matches(self, other: "Grid", atol: float = 1e-6) -> bool:
        return self.dims == other.dims and np.allclose(self.affine, other.affine, atol=atol)

    def require_match(self, other: "Grid", what: str = "入力") -> None:
        if not self.matches(other):
            raise ImageGridError(
                f"{what} のグリッドが一致しません: dims {self.dims} vs {other.dims}, "
                f"spacing {self.spacing} vs {other.spacing}"
            )

    def downsampled(self) -> "Grid":
        """1 つおきに間引いたグリッド (原点は据え置き、スペーシングは 2 倍)"""
        dims = tuple((d + 1) // 2 for d in self.dims)
        affine = self.affine.copy()
        affine[:3, :3] = affine[:3, :3] * 2.0
        return Grid(dims, tuple(2.0 * s for s in self.spacing), affine)


def _frozen_array(data, dtype, shape, what: str) -> np.ndarray:
    array = np.array(data, dtype=dtype)
    if array.shape != tuple(shape):
        raise ImageGridError(f"{what} の形状 {array.shape} がグリッド {tuple(shape)} と一致しません")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Volume:
    """
    スカラーボリューム (画像 I_i、ラベルマップ、平均画像など)

    Attributes:
        data: 形状 (nx, ny, nz) の float64 配列
        grid: グリッドのメタデータ
    """
    data: np.ndarray = field(repr=False)
    grid: Grid

    def __post_init__(self):
        data = _frozen_array(self.data, np.float64, self.grid.dims, "Volume")
        if not np.all(np.isfinite(data)):
            raise ImageGridError("Volume に NaN/Inf が含まれています")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.grid.dims

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return self.grid.spacing

    @property
    def affine(self) -> np.ndarray:
        return self.grid.affine

    def flat(self) -> np.ndarray:
        """x-fastest で平坦化したデータ"""
        return self.data.ravel(order="F")


@dataclass(frozen=True, eq=False)
class Mask:
    """
    {0, 1} のマスク (正常組織領域 H_i、共通領域 H など)

    data は bool 配列として保持する。
    """
    data: np.ndarray = field(repr=False)
    grid: Grid

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype != np.bool_:
            if not np.all(np.isin(raw, (0, 1))):
                raise ImageGridError("Mask の値は 0 か 1 のみです")
        data = _frozen_array(raw.astype(bool), np.bool_, self.grid.dims, "Mask")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.grid.dims

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def as_float(self) -> np.ndarray:
        return self.data.astype(np.float64)

    @classmethod
    def full(cls, grid: Grid) -> "Mask":
        return cls(np.ones(grid.dims, dtype=bool), grid)


@dataclass(frozen=True, eq=False)
class VectorVolume:
    """
    3 成分ベクトル場 (速度場 v、変位場 u)。単位は mm、ワールド軸。

    Attributes:
        data: 形状 (nx, ny, nz, 3) の float64 配列
        grid: グリッドのメタデータ
    """
    data: np.ndarray = field(repr=False)
    grid: Grid

    def __post_init__(self):
        data = _frozen_array(self.data, np.float64, (*self.grid.dims, 3), "VectorVolume")
        if not np.all(np.isfinite(data)):
            raise ImageGridError("VectorVolume に NaN/Inf が含まれています")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.grid.dims

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorVolume":
        return cls(np.zeros((*grid.dims, 3)), grid)

    def norm(self) -> np.ndarray:
        return np.linalg.norm(self.data, axis=-1)

    def __neg__(self) -> "VectorVolume":
        return VectorVolume(-self.data, self.grid)

    def __add__(self, other: "VectorVolume") -> "VectorVolume":
        self.grid.require_match(other.grid, "ベクトル場の加算")
        return VectorVolume(self.data + other.data, self.grid)


def sample_points(data: np.ndarray, points: np.ndarray) -> np.ndarray:
    """
    連続ボクセル座標での三線形補間 (境界はクランプ)

    Args:
        data: 形状 (nx, ny, nz) の配列
        points: 形状 (..., 3) のボクセル座標

    Returns:
        形状 (...) の補間値
    """
    points = np.asarray(points, dtype=np.float64)
    coords = np.moveaxis(points, -1, 0).reshape(3, -1)
    values = ndimage.map_coordinates(data, coords, order=1, mode="nearest")
    return values.reshape(points.shape[:-1])


def sample_trilinear(vol: Volume, point: Sequence[float]) -> float:
    """
    1 点での三線形補間

    Args:
        vol: 入力ボリューム
        point: 連続ボクセル座標 (i, j, k)

    Returns:
        補間値。グリッド外の座標は境界にクランプされる。
    """
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (3,) or not np.all(np.isfinite(point)):
        raise ImageGridError(f"サンプル点が不正です: {point}")
    return float(sample_points(vol.data, point[None, :])[0])


def _require_min_dims(grid: Grid, minimum: int, what: str) -> None:
    if any(d < minimum for d in grid.dims):
        raise ImageGridError(f"{what} には各軸 {minimum} 以上のボクセルが必要です: dims={grid.dims}")


def gradient_array(data: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """中心差分 (面では片側差分) の勾配。最後の軸に (d/dx, d/dy, d/dz) を積む。"""
    return np.stack(np.gradient(data, *spacing, edge_order=1), axis=-1)


def gradient_central(vol: Volume) -> VectorVolume:
    """
    スカラーボリュームの空間勾配 [強度/mm]

    Args:
        vol: 入力ボリューム (各軸 2 ボクセル以上)

    Returns:
        グリッド軸方向の偏微分を成分とするベクトル場
    """
    _require_min_dims(vol.grid, 2, "gradient_central")
    return VectorVolume(gradient_array(vol.data, vol.spacing), vol.grid)


def gaussian_kernel(sigma_voxels: float) -> np.ndarray:
    """半径 ceil(3σ) の正規化済み離散ガウスカーネル"""
    radius = int(math.ceil(3.0 * sigma_voxels))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma_voxels) ** 2)
    return kernel / kernel.sum()


def smooth_array(data: np.ndarray, spacing: Sequence[float], sigma_mm: SigmaLike) -> np.ndarray:
    """
    分離可能なガウス平滑化 (最初の 3 軸のみ、エッジ複製)

    ベクトル場 (nx, ny, nz, 3) にもそのまま使える。
    """
    sigma = _as_triplet(sigma_mm, "sigma_mm")
    if any(s < 0 for s in sigma):
        raise ImageGridError(f"sigma は 0 以上が必要です: {sigma_mm}")
    result = np.array(data, dtype=np.float64)
    for axis, (s, h) in enumerate(zip(sigma, spacing)):
        if s == 0:
            continue
        kernel = gaussian_kernel(s / h)
        result = ndimage.correlate1d(result, kernel, axis=axis, mode="nearest")
    return result


def gaussian_smooth(vol: Volume, sigma_mm: SigmaLike) -> Volume:
    """
    ガウス平滑化

    Args:
        vol: 入力ボリューム
        sigma_mm: 各軸の標準偏差 [mm] (スカラーなら等方)

    Returns:
        平滑化後のボリューム。sigma 0 の軸は変更しない。
    """
    return Volume(smooth_array(vol.data, vol.spacing, sigma_mm), vol.grid)


def downsample2(vol: Volume) -> Volume:
    """
    1/2 ダウンサンプリング

    細グリッドの 1 ボクセル分 (σ = spacing) でガウス平滑化してから
    1 つおきに間引く。dims は ceil(d/2)、spacing は 2 倍になる。
    """
    _require_min_dims(vol.grid, 2, "downsample2")
    smoothed = smooth_array(vol.data, vol.spacing, vol.spacing)
    return Volume(smoothed[::2, ::2, ::2], vol.grid.downsampled())


def downsample_mask(mask: Mask) -> Mask:
    """マスクを {0,1} 場として downsample2 し、0.5 以上で二値化"""
    coarse = downsample2(Volume(mask.as_float(), mask.grid))
    return Mask(coarse.data >= 0.5, coarse.grid)


def downsample_levels(vol: Volume, levels: int) -> Volume:
    """downsample2 を levels 回適用"""
    for _ in range(levels):
        vol = downsample2(vol)
    return vol


def downsample_mask_levels(mask: Mask, levels: int) -> Mask:
    for _ in range(levels):
        mask = downsample_mask(mask)
    return mask


def box_mean(data: np.ndarray, radius: int) -> np.ndarray:
    """
    (2r+1)^3 の箱型窓の局所平均

    窓はグリッド内に切り詰め、グリッド内のボクセル数で割る。
    """
    size = 2 * radius + 1
    total = ndimage.uniform_filter(data, size=size, mode="constant", cval=0.0)
    support = ndimage.uniform_filter(np.ones_like(data), size=size, mode="constant", cval=0.0)
    return total / support


def resample_points_to(source: Grid, target: Grid) -> np.ndarray:
    """target の各ボクセル中心に対応する source のボクセル座標 (nx, ny, nz, 3)"""
    index = np.stack(np.meshgrid(*[np.arange(d) for d in target.dims], indexing="ij"), axis=-1)
    return source.world_to_voxel(target.voxel_to_world(index.astype(np.float64)))


def _check_same_extent(source: Grid, target: Grid) -> None:
    tolerance = np.asarray(source.spacing) + 1e-6
    first = target.voxel_to_world(np.zeros(3)) - source.voxel_to_world(np.zeros(3))
    last_target = target.voxel_to_world(np.asarray(target.dims, dtype=np.float64) - 1)
    last_source = source.voxel_to_world(np.asarray(source.dims, dtype=np.float64) - 1)
    first_vox = np.abs(first @ source.inverse_linear.T) * np.asarray(source.spacing)
    last_vox = np.abs((last_target - last_source) @ source.inverse_linear.T) * np.asarray(source.spacing)
    if np.any(first_vox > tolerance) or np.any(last_vox > tolerance):
        raise ImageGridError(
            f"物理的な範囲が粗グリッド 1 ボクセル以上ずれています: "
            f"source dims={source.dims} spacing={source.spacing}, "
            f"target dims={target.dims} spacing={target.spacing}"
        )


def upsample_to(vector_field: VectorVolume, target: Grid) -> VectorVolume:
    """
    ベクトル場を target グリッドへ三線形リサンプリング

    成分は mm 単位なので値のスケーリングは行わない。

    Args:
        vector_field: 入力ベクトル場 (通常は粗グリッド)
        target: 出力グリッド (同じ物理範囲を覆うこと)

    Returns:
        target 上のベクトル場
    """
    if vector_field.grid.matches(target, atol=0.0):
        return vector_field
    _check_same_extent(vector_field.grid, target)
    points = resample_points_to(vector_field.grid, target)
    components = [sample_points(vector_field.data[..., c], points) for c in range(3)]
    return VectorVolume(np.stack(components, axis=-1), target)


def require_common_grid(grids: Sequence[Grid], what: str = "入力") -> Grid:
    """全グリッドが一致することを確認し、先頭を返す"""
    if not grids:
        raise ImageGridError(f"{what} が空です")
    first = grids[0]
    for other in grids[1:]:
        first.require_match(other, what)
    return first

"""
定常速度場 (SVF) による微分同相変換

scaling-and-squaring による指数写像、変位場の合成、画像/マスク/ラベルの
ワープ、ヤコビアン行列式を提供する。

規約:
    - 変位場 u は mm 単位・ワールド軸。T(x) = x + u(x)。
    - ワープは pull-back: warped(x) = I(x + u(x))。
    - サンプリングは三線形、境界はクランプ。

微分可能なカーネル (*_tensor) は torch で実装し、loss.py の自動微分と
共有する。numpy 側の公開関数はその薄いラッパ。
"""

import logging
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from errors import ImageGridError
from image_core import Grid, Mask, VectorVolume, Volume

logger = logging.getLogger(__name__)

DEFAULT_SQUARING_STEPS = 7

# T = id + u を定義する変位場と、ヤコビアン行列式マップ
DisplacementField = VectorVolume
JacobianMap = Volume


class FieldSampler:
    """
    1 つのグリッドに束縛した三線形サンプラ (torch.grid_sample)

    値 (N, C, nx, ny, nz) を、各ボクセル中心から mm 変位 (N, 3, nx, ny, nz)
    だけずらした位置でサンプリングする。
    """

    def __init__(self, grid: Grid):
        if any(d < 2 for d in grid.dims):
            raise ImageGridError(f"変換には各軸 2 ボクセル以上が必要です: dims={grid.dims}")
        self.grid = grid
        dims = torch.tensor(grid.dims, dtype=torch.float64)
        self._scale = 2.0 / (dims - 1.0)
        self._mm_to_voxel = torch.tensor(grid.inverse_linear.T.copy(), dtype=torch.float64)
        axes = [torch.arange(d, dtype=torch.float64) for d in grid.dims]
        index = torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)
        self._base = index * self._scale - 1.0

    def sample(self, values: torch.Tensor, displacement: torch.Tensor) -> torch.Tensor:
        """
        Args:
            values: (N, C, nx, ny, nz)
            displacement: (N, 3, nx, ny, nz) [mm]

        Returns:
            (N, C, nx, ny, nz) のサンプル値
        """
        offset = displacement.permute(0, 2, 3, 4, 1) @ self._mm_to_voxel
        coords = self._base + offset * self._scale
        # grid_sample の最後の軸は (W, H, D) = (k, j, i) の順
        return F.grid_sample(
            values,
            coords.flip(-1),
            mode="bilinear",
            padding_mode="border",
            align_corners=True,
        )


def compose_tensor(sampler: FieldSampler, outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    """u(x) = u_inner(x) + u_outer(x + u_inner(x))"""
    return inner + sampler.sample(outer, inner)


def exponentiate_tensor(sampler: FieldSampler, velocity: torch.Tensor, steps: int) -> torch.Tensor:
    """scaling-and-squaring: v / 2^S を S 回自己合成"""
    displacement = velocity / (2.0 ** steps)
    for _ in range(steps):
        displacement = compose_tensor(sampler, displacement, displacement)
    return displacement


def field_to_tensor(vector_field: VectorVolume) -> torch.Tensor:
    """(nx, ny, nz, 3) -> (3, nx, ny, nz)"""
    return torch.tensor(vector_field.data, dtype=torch.float64).permute(3, 0, 1, 2).contiguous()


def tensor_to_field(tensor: torch.Tensor, grid: Grid) -> VectorVolume:
    """(3, nx, ny, nz) -> VectorVolume"""
    return VectorVolume(tensor.detach().permute(1, 2, 3, 0).cpu().numpy(), grid)


def scalar_to_tensor(data: np.ndarray) -> torch.Tensor:
    return torch.tensor(np.asarray(data, dtype=np.float64), dtype=torch.float64)


def exponentiate(velocity: VectorVolume, squaring_steps: int = DEFAULT_SQUARING_STEPS) -> DisplacementField:
    """
    速度場の指数写像 exp(v)

    Args:
        velocity: 定常速度場 [mm]
        squaring_steps: 自己合成の回数 S (1 以上)

    Returns:
        exp(v) を表す変位場
    """
    if squaring_steps < 1:
        raise ValueError(f"squaring_steps は 1 以上が必要です: {squaring_steps}")
    sampler = FieldSampler(velocity.grid)
    with torch.no_grad():
        u = exponentiate_tensor(sampler, field_to_tensor(velocity)[None], squaring_steps)
    return tensor_to_field(u[0], velocity.grid)


def compose(u_outer: DisplacementField, u_inner: DisplacementField) -> DisplacementField:
    """
    変位場の合成 T_outer ∘ T_inner

    Args:
        u_outer: 外側の変位場
        u_inner: 内側の変位場

    Returns:
        (T_outer ∘ T_inner)(x) = T_outer(x + u_inner(x)) の変位場
    """
    u_outer.grid.require_match(u_inner.grid, "compose")
    sampler = FieldSampler(u_inner.grid)
    with torch.no_grad():
        u = compose_tensor(sampler, field_to_tensor(u_outer)[None], field_to_tensor(u_inner)[None])
    return tensor_to_field(u[0], u_inner.grid)


def _warp_channels(channels: np.ndarray, u: DisplacementField) -> np.ndarray:
    """(C, nx, ny, nz) の各チャネルを u でワープ"""
    sampler = FieldSampler(u.grid)
    with torch.no_grad():
        warped = sampler.sample(scalar_to_tensor(channels)[None], field_to_tensor(u)[None])
    return warped[0].numpy()


def warp(img: Volume, u: DisplacementField) -> Volume:
    """
    画像のワープ I ∘ T

    Args:
        img: 入力画像
        u: 変位場 (img と同じグリッド)

    Returns:
        output(x) = I(x + u(x)) の画像
    """
    img.grid.require_match(u.grid, "warp")
    return Volume(_warp_channels(img.data[None], u)[0], img.grid)


def warp_mask(mask: Mask, u: DisplacementField) -> Mask:
    """{0,1} 場を三線形ワープし、0.5 以上で二値化"""
    mask.grid.require_match(u.grid, "warp_mask")
    warped = _warp_channels(mask.as_float()[None], u)[0]
    return Mask(warped >= 0.5, mask.grid)


def warp_labels(labels: Volume, u: DisplacementField, classes: Optional[Sequence[int]] = None) -> Volume:
    """
    ラベルマップのワープ

    各クラスの指示関数を三線形ワープし、ボクセルごとに最大のクラスを選ぶ
    (同値なら小さいクラス ID)。

    Args:
        labels: 整数コードのラベルマップ
        u: 変位場
        classes: 対象クラス ID (省略時はラベルに現れる全クラス)

    Returns:
        ワープ後のラベルマップ
    """
    labels.grid.require_match(u.grid, "warp_labels")
    if classes is None:
        classes = np.unique(np.rint(labels.data).astype(np.int64))
    classes = np.asarray(sorted(int(c) for c in classes))
    codes = np.rint(labels.data).astype(np.int64)
    indicators = np.stack([(codes == c).astype(np.float64) for c in classes])
    warped = _warp_channels(indicators, u)
    return Volume(classes[np.argmax(warped, axis=0)].astype(np.float64), labels.grid)


def jacobian_matrix(u: DisplacementField) -> np.ndarray:
    """
    ∂T/∂x = I + ∂u/∂x (中心差分、mm 単位)

    Returns:
        形状 (nx, ny, nz, 3, 3) の配列。[..., a, b] = ∂T_a/∂x_b
    """
    if any(d < 2 for d in u.dims):
        raise ImageGridError(f"jacobian には各軸 2 ボクセル以上が必要です: dims={u.dims}")
    # インデックス方向の微分をワールド軸へ引き戻す
    index_derivative = np.stack(
        [np.stack(np.gradient(u.data[..., a], edge_order=1), axis=-1) for a in range(3)],
        axis=-2,
    )
    return np.eye(3) + index_derivative @ u.grid.inverse_linear


def jacobian_determinant(u: DisplacementField) -> JacobianMap:
    """
    ヤコビアン行列式 J_T = det(I + ∂u/∂x)

    Args:
        u: 変位場

    Returns:
        ボクセルごとの行列式 (無次元)
    """
    return Volume(np.linalg.det(jacobian_matrix(u)), u.grid)

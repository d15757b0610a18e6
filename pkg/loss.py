"""
グループワイズ損失

    Ī    = (1/n) Σ I_i ∘ T_i
    Loss = -(1/n) Σ LNCC(I_i ∘ T_i, Ī; H) + λ (1/n) Σ L_reg(v_i)

H は現在の変換でワープした正常組織マスク H_i の共通部分。
勾配は torch の自動微分で、ワープ・平均画像・scaling-and-squaring の
全段を通して計算する。H は反復ごとの定数として扱う (二値化は微分しない)。
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from config import RegistrationConfig
from errors import EmptyCommonMaskError, ImageGridError
from image_core import (
    Grid,
    Mask,
    VectorVolume,
    Volume,
    downsample_levels,
    downsample_mask_levels,
    require_common_grid,
)
from transform import FieldSampler, exponentiate_tensor, field_to_tensor, scalar_to_tensor, tensor_to_field

logger = logging.getLogger(__name__)


@dataclass
class Group:
    """
    同時に位置合わせする n 個の時点

    Attributes:
        images: 各時点の画像 I_i
        masks: 各時点の正常組織マスク H_i
        labels: 各時点の組織ラベル (任意)
    """
    images: List[Volume]
    masks: List[Mask]
    labels: Optional[List[Volume]] = None

    def __post_init__(self):
        if len(self.images) < 2:
            raise ImageGridError(f"グループには 2 時点以上が必要です: n={len(self.images)}")
        if len(self.masks) != len(self.images):
            raise ImageGridError(f"画像 {len(self.images)} 枚に対してマスクが {len(self.masks)} 枚です")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ImageGridError(f"画像 {len(self.images)} 枚に対してラベルが {len(self.labels)} 枚です")
        grids = [v.grid for v in self.images] + [m.grid for m in self.masks]
        if self.labels is not None:
            grids += [label.grid for label in self.labels]
        require_common_grid(grids, "グループ")

    @property
    def n(self) -> int:
        return len(self.images)

    @property
    def grid(self) -> Grid:
        return self.images[0].grid

    def downsampled(self, levels: int) -> "Group":
        """画像とマスクを levels 回 downsample2 したグループ (ラベルは持たない)"""
        if levels == 0:
            return self
        return Group(
            images=[downsample_levels(image, levels) for image in self.images],
            masks=[downsample_mask_levels(mask, levels) for mask in self.masks],
        )

    def permuted(self, order: Sequence[int]) -> "Group":
        return Group(
            images=[self.images[i] for i in order],
            masks=[self.masks[i] for i in order],
            labels=None if self.labels is None else [self.labels[i] for i in order],
        )


@dataclass(frozen=True)
class LossBreakdown:
    """total = -similarity_term + λ·regularizer_term"""
    total: float
    similarity_term: float
    regularizer_term: float
    masked_voxel_count: int


def mean_image(warped: Sequence[Volume]) -> Volume:
    """ワープ済み画像のボクセルごとの算術平均 Ī"""
    if len(warped) < 2:
        raise ImageGridError("mean_image には 2 枚以上の画像が必要です")
    grid = require_common_grid([v.grid for v in warped], "mean_image")
    return Volume(np.sum([v.data for v in warped], axis=0) / len(warped), grid)


def common_mask(warped_masks: Sequence[Mask]) -> Mask:
    """
    共通領域 H = H_1 ∧ ... ∧ H_n

    空の共通部分はエラーにせずそのまま返す (呼び出し側で判断する)。
    """
    if len(warped_masks) < 2:
        raise ImageGridError("common_mask には 2 枚以上のマスクが必要です")
    grid = require_common_grid([m.grid for m in warped_masks], "common_mask")
    return Mask(np.logical_and.reduce([m.data for m in warped_masks]), grid)


def box_mean_tensor(x: torch.Tensor, radius: int) -> torch.Tensor:
    """(N, C, nx, ny, nz) の箱型窓平均。窓はグリッド内に切り詰める。"""
    size = 2 * radius + 1
    return F.avg_pool3d(x, kernel_size=size, stride=1, padding=radius, count_include_pad=False)


def lncc_map_tensor(a: torch.Tensor, b: torch.Tensor, radius: int, epsilon: float) -> torch.Tensor:
    """ボクセルごとの局所相関係数 (各局所分散に ε を加える)"""
    mu_a = box_mean_tensor(a, radius)
    mu_b = box_mean_tensor(b, radius)
    var_a = box_mean_tensor(a * a, radius) - mu_a * mu_a
    var_b = box_mean_tensor(b * b, radius) - mu_b * mu_b
    cov = box_mean_tensor(a * b, radius) - mu_a * mu_b
    return cov / torch.sqrt((var_a + epsilon) * (var_b + epsilon))


def regularizer_tensor(velocity: torch.Tensor, spacing: Sequence[float]) -> torch.Tensor:
    """
    拡散正則化: 速度場の空間勾配の Frobenius ノルム二乗のボクセル平均

    Args:
        velocity: (N, 3, nx, ny, nz)
        spacing: 各軸の mm

    Returns:
        (N,) のメンバーごとの値
    """
    derivatives = torch.gradient(velocity, spacing=list(spacing), dim=(2, 3, 4), edge_order=1)
    squared = sum((d * d).sum(dim=1) for d in derivatives)
    return squared.flatten(start_dim=1).mean(dim=1)


def lncc(a: Volume, b: Volume, mask: Mask, window_radius: int = 4, epsilon: float = 1e-5) -> float:
    """
    マスク内の局所正規化相互相関

    Args:
        a, b: 同じグリッドの画像
        mask: 評価領域
        window_radius: 箱型窓の半径 (既定 4 = 9^3)
        epsilon: 局所分散の下限

    Returns:
        マスク内ボクセルの LNCC 平均 ([-1, 1])
    """
    require_common_grid([a.grid, b.grid, mask.grid], "lncc")
    if window_radius < 1:
        raise ValueError(f"window_radius は 1 以上が必要です: {window_radius}")
    if mask.count == 0:
        raise EmptyCommonMaskError("lncc のマスクが空です")
    with torch.no_grad():
        cc = lncc_map_tensor(
            scalar_to_tensor(a.data)[None, None],
            scalar_to_tensor(b.data)[None, None],
            window_radius,
            epsilon,
        )[0, 0].numpy()
    return float(cc[mask.data].mean())


def regularizer(velocity: VectorVolume) -> float:
    """速度場の拡散正則化項"""
    if any(d < 2 for d in velocity.dims):
        raise ImageGridError(f"regularizer には各軸 2 ボクセル以上が必要です: dims={velocity.dims}")
    with torch.no_grad():
        value = regularizer_tensor(field_to_tensor(velocity)[None], velocity.grid.spacing)
    return float(value[0])


class GroupObjective:
    """
    1 グループ・1 グリッド上の損失関数

    速度場は base + residual として評価する (多段処理の残差速度場用)。
    base を省略すると residual がそのまま速度場になる。
    """

    def __init__(
        self,
        group: Group,
        config: RegistrationConfig,
        base_velocities: Optional[torch.Tensor] = None,
    ):
        self.group = group
        self.config = config
        self.sampler = FieldSampler(group.grid)
        self.images = torch.stack([scalar_to_tensor(image.data) for image in group.images])[:, None]
        if config.use_mask:
            self.masks = torch.stack([scalar_to_tensor(mask.as_float()) for mask in group.masks])[:, None]
        else:
            self.masks = None
        self.base = base_velocities

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.group.n, 3, *self.group.grid.dims)

    def velocities(self, residual: torch.Tensor) -> torch.Tensor:
        return residual if self.base is None else self.base + residual

    def common_region(self, displacement: torch.Tensor) -> torch.Tensor:
        """現在の変換でワープしたマスクの共通部分 (定数として返す)"""
        with torch.no_grad():
            if self.masks is None:
                return torch.ones(self.group.grid.dims, dtype=torch.bool)
            warped = self.sampler.sample(self.masks, displacement.detach()) >= 0.5
            return warped[:, 0].all(dim=0)

    def evaluate(
        self,
        residual: torch.Tensor,
        iteration: Optional[int] = None,
    ) -> Tuple[torch.Tensor, LossBreakdown]:
        """
        損失を計算

        Args:
            residual: (n, 3, nx, ny, nz) の残差速度場 [mm]
            iteration: エラーメッセージ用の反復番号

        Returns:
            (微分可能な total, LossBreakdown)
        """
        config = self.config
        velocity = self.velocities(residual)
        displacement = exponentiate_tensor(self.sampler, velocity, config.squaring_steps)
        warped = self.sampler.sample(self.images, displacement)
        average = warped.mean(dim=0, keepdim=True)

        region = self.common_region(displacement)
        count = int(region.sum())
        if count == 0:
            raise EmptyCommonMaskError("ワープ後の正常組織マスクが重なりません (共通領域 H が空)", iteration)
        weights = region.to(torch.float64)

        cc = lncc_map_tensor(warped, average.expand_as(warped), config.window_radius, config.variance_epsilon)
        per_member = (cc[:, 0] * weights).flatten(start_dim=1).sum(dim=1) / count
        similarity = per_member.mean()
        smoothness = regularizer_tensor(velocity, self.group.grid.spacing).mean()
        total = -similarity + config.lambda_ * smoothness

        breakdown = LossBreakdown(
            total=total.item(),
            similarity_term=similarity.item(),
            regularizer_term=smoothness.item(),
            masked_voxel_count=count,
        )
        return total, breakdown


def _velocity_tensor(group: Group, velocities: Sequence[VectorVolume]) -> torch.Tensor:
    if len(velocities) != group.n:
        raise ImageGridError(f"速度場の数 {len(velocities)} がグループの時点数 {group.n} と一致しません")
    require_common_grid([group.grid] + [v.grid for v in velocities], "速度場")
    return torch.stack([field_to_tensor(v) for v in velocities])


def total_loss(group: Group, velocities: Sequence[VectorVolume], config: RegistrationConfig) -> LossBreakdown:
    """
    グループワイズ損失の値

    Args:
        group: 位置合わせ対象
        velocities: 各時点の速度場 v_i
        config: λ・窓半径・二乗回数など

    Returns:
        LossBreakdown
    """
    objective = GroupObjective(group, config)
    with torch.no_grad():
        _, breakdown = objective.evaluate(_velocity_tensor(group, velocities))
    return breakdown


def loss_gradient(
    group: Group,
    velocities: Sequence[VectorVolume],
    config: RegistrationConfig,
) -> List[VectorVolume]:
    """
    損失の各速度場成分に関する勾配

    Returns:
        各時点の ∂Loss/∂v_i (速度場と同じグリッド)
    """
    objective = GroupObjective(group, config)
    velocity = _velocity_tensor(group, velocities).requires_grad_(True)
    total, _ = objective.evaluate(velocity)
    total.backward()
    return [tensor_to_field(g, group.grid) for g in velocity.grad]

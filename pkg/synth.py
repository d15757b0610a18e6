"""
合成ファントムと正解変形の生成

臨床データなしで位置合わせの性質を検証するための決定的なデータ生成器。

乱数:
    numpy の PCG64 (Generator(PCG64(seed))) を明示的に使う。PCG64 は
    numpy がビットストリームの互換性を保証しているビット生成器で、
    同じ seed からは環境によらず同じ系列が得られる。メンバーごとの
    seed は SeedSequence(seed).spawn() で派生させる。

ラベル: 0 背景, 1 CSF, 2 GM, 3 WM, 4 腫瘍
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, Sequence

import numpy as np
from numpy.random import PCG64, Generator, SeedSequence
from scipy import ndimage

from errors import SynthesisError
from image_core import Grid, Mask, VectorVolume, Volume, smooth_array
from loss import Group
from transform import exponentiate, jacobian_determinant, warp, warp_labels, warp_mask

logger = logging.getLogger(__name__)

BACKGROUND, CSF, GM, WM, TUMOR = 0, 1, 2, 3, 4
LABEL_CLASSES = (BACKGROUND, CSF, GM, WM, TUMOR)

# FLAIR 風の強度 (CSF 低信号、腫瘍高信号)
CLASS_INTENSITY = {BACKGROUND: 0.0, CSF: 20.0, GM: 70.0, WM: 50.0, TUMOR: 110.0}

# 頭部楕円体の半径 (グリッド範囲に対する比) と層の境界 (正規化半径)
HEAD_FRACTION = 0.42
VENTRICLE_RADIUS = 0.18
WM_RADIUS = 0.55
GM_RADIUS = 0.78
TUMOR_FRACTION = 0.12
TUMOR_OFFSET = 0.35


def make_rng(seed: int) -> Generator:
    return Generator(PCG64(seed))


def derive_seeds(seed: int, count: int) -> List[int]:
    """メンバーごとの独立な seed"""
    return [int(child.generate_state(1)[0]) for child in SeedSequence(seed).spawn(count)]


@dataclass(frozen=True)
class Phantom:
    """
    合成ファントム

    (image, labels, head) の順でアンパックできる。
    """
    image: Volume
    labels: Volume
    head: Mask
    tumor_center_mm: np.ndarray
    tumor_radius_mm: float

    def __iter__(self) -> Iterator:
        return iter((self.image, self.labels, self.head))

    @property
    def grid(self) -> Grid:
        return self.image.grid

    @property
    def dynamic_range(self) -> float:
        return float(self.image.data.max() - self.image.data.min())


@dataclass(frozen=True)
class SyntheticGroup:
    """
    合成グループと正解

    Attributes:
        group: 位置合わせ対象 (画像・マスク・ラベル)
        true_velocities: 正解の速度場 (総和 0)。メンバー i は phantom ∘ exp(v_i)
        phantom: 変形前のファントム
    """
    group: Group
    true_velocities: List[VectorVolume]
    phantom: Phantom


def _world_coordinates(grid: Grid) -> np.ndarray:
    index = np.stack(np.meshgrid(*[np.arange(d) for d in grid.dims], indexing="ij"), axis=-1)
    return grid.voxel_to_world(index.astype(np.float64))


def make_phantom(
    dims: Sequence[int],
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    seed: int = 0,
    noise_fraction: float = 0.01,
) -> Phantom:
    """
    同心楕円体の脳ファントムを作成

    Args:
        dims: グリッドのボクセル数 (各軸 32 以上推奨)
        spacing: ボクセルサイズ [mm]
        seed: 腫瘍位置とノイズの seed
        noise_fraction: ガウスノイズの標準偏差 (強度レンジに対する比)

    Returns:
        Phantom
    """
    grid = Grid.from_spacing(dims, spacing)
    rng = make_rng(seed)
    world = _world_coordinates(grid)
    center = grid.voxel_to_world((np.asarray(grid.dims, dtype=np.float64) - 1) / 2)
    semi_axes = HEAD_FRACTION * np.maximum(grid.extent, 1e-6)

    offset = world - center
    rho = np.sqrt(np.sum((offset / semi_axes) ** 2, axis=-1))
    # 境界の凹凸 (低次の角度変調)
    theta = np.arctan2(offset[..., 1], offset[..., 0])
    cos_phi = offset[..., 2] / np.maximum(np.linalg.norm(offset, axis=-1), 1e-9)
    rho = rho * (1.0 + 0.06 * np.sin(3.0 * theta) + 0.04 * cos_phi * np.cos(2.0 * theta))

    labels = np.full(grid.dims, BACKGROUND, dtype=np.int64)
    labels[rho <= 1.0] = CSF
    labels[rho <= GM_RADIUS] = GM
    labels[rho <= WM_RADIUS] = WM
    labels[rho <= VENTRICLE_RADIUS] = CSF

    tumor_radius = TUMOR_FRACTION * float(np.min(grid.extent))
    angle = rng.uniform(0.0, 2.0 * np.pi)
    direction = np.array([np.cos(angle), np.sin(angle), rng.uniform(-0.3, 0.3)])
    direction /= np.linalg.norm(direction)
    tumor_center = center + TUMOR_OFFSET * semi_axes * direction
    labels[np.linalg.norm(world - tumor_center, axis=-1) <= tumor_radius] = TUMOR

    clean = np.vectorize(CLASS_INTENSITY.get, otypes=[np.float64])(labels)
    clean = smooth_array(clean, grid.spacing, grid.spacing)
    intensity_range = max(CLASS_INTENSITY.values()) - min(CLASS_INTENSITY.values())
    image = clean + rng.normal(0.0, noise_fraction * intensity_range, size=grid.dims)

    return Phantom(
        image=Volume(image, grid),
        labels=Volume(labels.astype(np.float64), grid),
        head=Mask(labels != BACKGROUND, grid),
        tumor_center_mm=tumor_center,
        tumor_radius_mm=tumor_radius,
    )


def random_smooth_velocity(
    dims: Sequence[int],
    spacing: Sequence[float],
    amplitude_mm: float,
    smoothness_sigma_mm: float,
    seed: int,
    support: Mask = None,
) -> VectorVolume:
    """
    滑らかなランダム速度場

    白色ノイズを成分ごとにガウス平滑化し、最大ノルムが amplitude_mm に
    なるようにスケーリングする。support を与えると、その領域から
    σ だけ広げた範囲の外で 0 に減衰させる。

    Args:
        dims: グリッドのボクセル数
        spacing: ボクセルサイズ [mm]
        amplitude_mm: 最大ノルム (0 以上)
        smoothness_sigma_mm: 平滑化の σ (正)
        seed: 乱数の seed
        support: 頭部マスク (任意)

    Returns:
        速度場 [mm]
    """
    if amplitude_mm < 0:
        raise ValueError(f"amplitude_mm は 0 以上が必要です: {amplitude_mm}")
    if smoothness_sigma_mm <= 0:
        raise ValueError(f"smoothness_sigma_mm は正の値が必要です: {smoothness_sigma_mm}")
    grid = Grid.from_spacing(dims, spacing)
    if amplitude_mm == 0:
        return VectorVolume.zeros(grid)

    noise = make_rng(seed).standard_normal((*grid.dims, 3))
    velocity = smooth_array(noise, grid.spacing, smoothness_sigma_mm)
    if support is not None:
        margin = max(1, int(math.ceil(smoothness_sigma_mm / min(grid.spacing))))
        widened = ndimage.binary_dilation(support.data, iterations=margin)
        taper = smooth_array(widened.astype(np.float64), grid.spacing, smoothness_sigma_mm)
        velocity = velocity * taper[..., None]

    peak = float(np.linalg.norm(velocity, axis=-1).max())
    if peak == 0.0:
        return VectorVolume.zeros(grid)
    return VectorVolume(velocity * (amplitude_mm / peak), grid)


def radial_growth_velocity(grid: Grid, center_mm: np.ndarray, radius_mm: float, growth_mm: float) -> VectorVolume:
    """
    腫瘍の質量効果を模した放射状の速度場

    中心に向かう向きで、大きさは r = radius_mm で growth_mm になる
    滑らかな形状 (r/R)·exp((1 - (r/R)^2)/2)。pull-back ワープでは
    腫瘍が growth_mm だけ膨らんで見える。
    """
    offset = _world_coordinates(grid) - center_mm
    scaled = offset / radius_mm
    profile = np.exp(0.5 * (1.0 - np.sum(scaled ** 2, axis=-1)))
    return VectorVolume(-growth_mm * scaled * profile[..., None], grid)


def make_group(
    phantom: Phantom,
    n: int = 3,
    amplitude_mm: float = 6.0,
    tumor_growth: float = 0.0,
    intensity_shift: float = 0.0,
    seed: int = 0,
    smoothness_sigma_mm: float = 8.0,
    squaring_steps: int = 7,
    mask_margin: int = 2,
) -> SyntheticGroup:
    """
    正解変形つきの合成グループを作成

    n-1 個のランダム速度場を引き、n 個目をその和の符号反転にする
    (総和 0 = 真の平均空間はファントム自身)。腫瘍の成長は放射状の速度場
    としてメンバー順に 0 から tumor_growth mm まで加え、その平均を
    引いてから正解速度場に含める。腫瘍内の強度はメンバー順に
    0 から intensity_shift (強度レンジに対する比) まで持ち上げる。

    Args:
        phantom: make_phantom の出力
        n: 時点数 (2 以上)
        amplitude_mm: ランダム速度場の最大ノルム
        tumor_growth: 最終時点の腫瘍の膨張量 [mm]
        intensity_shift: 最終時点の腫瘍強度の変化 (レンジ比)
        seed: 乱数の seed
        smoothness_sigma_mm: ランダム速度場の平滑化 σ
        squaring_steps: 指数写像の二乗回数
        mask_margin: マスクから除外する腫瘍周囲の膨張ボクセル数

    Returns:
        SyntheticGroup
    """
    if n < 2:
        raise ValueError(f"n は 2 以上が必要です: {n}")
    grid = phantom.grid

    velocities = [
        random_smooth_velocity(grid.dims, grid.spacing, amplitude_mm, smoothness_sigma_mm, member_seed, phantom.head).data
        for member_seed in derive_seeds(seed, n - 1)
    ]
    velocities.append(-np.sum(velocities, axis=0))

    growth = [
        radial_growth_velocity(grid, phantom.tumor_center_mm, phantom.tumor_radius_mm, tumor_growth * i / (n - 1)).data
        for i in range(n)
    ]
    growth_mean = np.mean(growth, axis=0)
    true_velocities = [VectorVolume(v + g - growth_mean, grid) for v, g in zip(velocities, growth)]

    images, masks, labels = [], [], []
    for i, velocity in enumerate(true_velocities):
        displacement = exponentiate(velocity, squaring_steps)
        min_jacobian = float(jacobian_determinant(displacement).data.min())
        if min_jacobian <= 0.0:
            raise SynthesisError(
                f"メンバー {i} の正解変形が折り畳みを含みます (min J = {min_jacobian:.3f})。"
                f"amplitude_mm={amplitude_mm} または tumor_growth={tumor_growth} を小さくしてください"
            )

        member_labels = warp_labels(phantom.labels, displacement, LABEL_CLASSES)
        tumor = np.rint(member_labels.data) == TUMOR
        image = warp(phantom.image, displacement).data.copy()
        image[tumor] += intensity_shift * phantom.dynamic_range * i / (n - 1)

        excluded = ndimage.binary_dilation(tumor, iterations=mask_margin) if mask_margin > 0 else tumor
        head = warp_mask(phantom.head, displacement)

        images.append(Volume(image, grid))
        masks.append(Mask(head.data & ~excluded, grid))
        labels.append(member_labels)
        logger.info(f"メンバー {i}: min J = {min_jacobian:.3f}, 正常組織 {int(masks[-1].count)} ボクセル")

    return SyntheticGroup(
        group=Group(images=images, masks=masks, labels=labels),
        true_velocities=true_velocities,
        phantom=phantom,
    )

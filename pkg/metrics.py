"""
位置合わせの評価指標

Dice、マスク付き SSIM、中心性 (centrality)、ヤコビアンの滑らかさ、
逆変換の一貫性、正確な Wilcoxon 符号順位検定、およびレポートの
CSV / 表形式出力。指標はすべて正常組織の共通領域 H 内で計算する
(腫瘍の Dice のみ全域)。
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from errors import EmptyCommonMaskError, ImageGridError, StatisticsError
from image_core import Mask, VectorVolume, Volume, box_mean, require_common_grid
from loss import Group, common_mask, mean_image
from transform import (
    DEFAULT_SQUARING_STEPS,
    DisplacementField,
    JacobianMap,
    compose,
    exponentiate,
    jacobian_determinant,
    warp,
    warp_labels,
    warp_mask,
)

logger = logging.getLogger(__name__)

# ラベルのコード (0 は背景)
TISSUE_CLASSES: Dict[str, int] = {"csf": 1, "gm": 2, "wm": 3, "tumor": 4}

SSIM_RADIUS = 3  # 7^3 窓
SSIM_K1 = 0.01
SSIM_K2 = 0.03

REPORT_COLUMNS = [
    "group",
    "dice_csf",
    "dice_gm",
    "dice_wm",
    "dice_tumor",
    "ssim",
    "centrality",
    "centrality_mean_norm",
    "folding_pct",
    "jacobian_sd",
    "inverse_consistency_mean",
    "inverse_consistency_max",
    "runtime_s",
]


def _class_set(labels: Volume, class_id: int, region: Optional[Mask]) -> np.ndarray:
    voxels = np.rint(labels.data).astype(np.int64) == class_id
    if region is not None:
        voxels &= region.data
    return voxels


def dice(a: Volume, b: Volume, class_id: int, region: Optional[Mask] = None) -> float:
    """
    Dice 係数 2|A∩B| / (|A|+|B|)

    Args:
        a, b: 整数コードのラベルマップ
        class_id: 対象クラス
        region: 指定時はこの領域内のボクセルのみ数える

    Returns:
        Dice 係数。両方空なら 1.0
    """
    grids = [a.grid, b.grid] + ([] if region is None else [region.grid])
    require_common_grid(grids, "dice")
    set_a = _class_set(a, class_id, region)
    set_b = _class_set(b, class_id, region)
    size = int(set_a.sum()) + int(set_b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(set_a, set_b).sum()) / size


def group_dice(warped_labels: Sequence[Volume], class_id: int, region: Optional[Mask] = None) -> float:
    """全ての非順序ペア n(n-1)/2 組の Dice の平均"""
    if len(warped_labels) < 2:
        raise ImageGridError("group_dice には 2 枚以上のラベルマップが必要です")
    pairs = [
        dice(warped_labels[i], warped_labels[j], class_id, region)
        for i in range(len(warped_labels))
        for j in range(i + 1, len(warped_labels))
    ]
    return float(np.mean(pairs))


def _require_nonempty(mask: Mask, what: str) -> None:
    if mask.count == 0:
        raise EmptyCommonMaskError(f"{what} のマスクが空です")


def ssim_map(a: np.ndarray, b: np.ndarray, dynamic_range: float) -> np.ndarray:
    """7^3 箱型窓の局所 SSIM マップ (窓はグリッド内に切り詰め)"""
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    mu_a = box_mean(a, SSIM_RADIUS)
    mu_b = box_mean(b, SSIM_RADIUS)
    var_a = box_mean(a * a, SSIM_RADIUS) - mu_a * mu_a
    var_b = box_mean(b * b, SSIM_RADIUS) - mu_b * mu_b
    cov = box_mean(a * b, SSIM_RADIUS) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return numerator / denominator


def ssim_masked(a: Volume, b: Volume, mask: Mask) -> float:
    """
    マスク内の平均 SSIM

    ダイナミックレンジ L はマスク内の両画像を合わせた max - min。
    L = 0 (どちらも定数) のときは 1.0。
    """
    require_common_grid([a.grid, b.grid, mask.grid], "ssim_masked")
    _require_nonempty(mask, "ssim_masked")
    inside = np.concatenate([a.data[mask.data], b.data[mask.data]])
    dynamic_range = float(inside.max() - inside.min())
    if dynamic_range == 0.0:
        return 1.0
    return float(ssim_map(a.data, b.data, dynamic_range)[mask.data].mean())


def centrality(
    displacements: Sequence[DisplacementField],
    mask: Mask,
    mode: str = "norm_of_mean",
) -> float:
    """
    変形の中心性 [mm]

    Args:
        displacements: 各時点の変位場 (速度場を渡せば対数領域で測る)
        mask: 評価領域
        mode: "norm_of_mean" = ||(1/n)Σ u_i|| の平均 (既定)、
              "mean_of_norms" = (1/n)Σ ||u_i|| の平均

    Returns:
        マスク内の平均値
    """
    if len(displacements) < 2:
        raise ImageGridError("centrality には 2 個以上の変位場が必要です")
    require_common_grid([u.grid for u in displacements] + [mask.grid], "centrality")
    _require_nonempty(mask, "centrality")
    stacked = np.stack([u.data for u in displacements])
    if mode == "norm_of_mean":
        values = np.linalg.norm(stacked.mean(axis=0), axis=-1)
    elif mode == "mean_of_norms":
        values = np.linalg.norm(stacked, axis=-1).mean(axis=0)
    else:
        raise ValueError(f"未知の centrality モード: {mode}")
    return float(values[mask.data].mean())


def smoothness(jac: JacobianMap, mask: Mask) -> Tuple[float, float]:
    """
    ヤコビアンマップの折り畳み率と標準偏差

    Returns:
        (J_T <= 0 のボクセルの割合 [%], マスク内の J_T の標準偏差)
    """
    require_common_grid([jac.grid, mask.grid], "smoothness")
    _require_nonempty(mask, "smoothness")
    values = jac.data[mask.data]
    folding = 100.0 * float(np.count_nonzero(values <= 0.0)) / values.size
    return folding, float(values.std())


def inverse_consistency(
    velocity: VectorVolume,
    mask: Mask,
    squaring_steps: int = DEFAULT_SQUARING_STEPS,
) -> Tuple[float, float]:
    """
    exp(-v) ∘ exp(v) の残差変位

    Returns:
        (マスク内の平均 [mm], 最大 [mm])
    """
    _require_nonempty(mask, "inverse_consistency")
    residual = compose(exponentiate(-velocity, squaring_steps), exponentiate(velocity, squaring_steps))
    norms = residual.norm()[mask.data]
    return float(norms.mean()), float(norms.max())


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """
    両側の正確な Wilcoxon 符号順位検定

    差が 0 の組は除外し、同順位は平均順位にする。帰無分布は 2^m 通りの
    符号の割り当てを、順位和ごとの場合の数として数え上げる。

    Args:
        x, y: 対応のある標本 (同じ長さ、2 以上)

    Returns:
        (W = min(W+, W-), p 値)
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatisticsError(f"対応のある標本は同じ長さの 1 次元配列が必要です: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise StatisticsError(f"標本数が少なすぎます: {x.size}")

    differences = x - y
    differences = differences[differences != 0.0]
    m = differences.size
    if m == 0:
        raise StatisticsError("差がすべて 0 のため検定できません")

    ranks = rankdata(np.abs(differences))
    w_plus = float(ranks[differences > 0].sum())
    w_minus = float(ranks[differences < 0].sum())
    statistic = min(w_plus, w_minus)

    # 平均順位は半整数なので 2 倍して整数で数える
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for rank in doubled:
        shifted = counts.copy()
        shifted[rank:] += counts[:-rank]
        counts = shifted
    threshold = int(np.rint(2.0 * statistic))
    p_value = 2.0 * float(counts[: threshold + 1].sum()) / float(2 ** m)
    return statistic, min(1.0, p_value)


@dataclass
class MetricsReport:
    """1 グループ分の評価結果 (CSV の 1 行)"""
    group: str
    dice_csf: float = math.nan
    dice_gm: float = math.nan
    dice_wm: float = math.nan
    dice_tumor: float = math.nan
    ssim: float = math.nan
    centrality: float = math.nan
    centrality_mean_norm: float = math.nan
    folding_pct: float = math.nan
    jacobian_sd: float = math.nan
    inverse_consistency_mean: float = math.nan
    inverse_consistency_max: float = math.nan
    runtime_s: float = math.nan

    def to_row(self) -> Dict[str, str]:
        values = asdict(self)
        return {key: values[key] if key == "group" else repr(float(values[key])) for key in REPORT_COLUMNS}

    @classmethod
    def from_row(cls, row: Dict[str, str]) -> "MetricsReport":
        missing = [key for key in REPORT_COLUMNS if key not in row]
        if missing:
            raise ValueError(f"CSV の列が不足しています: {missing}")
        return cls(group=row["group"], **{key: float(row[key]) for key in REPORT_COLUMNS[1:]})


def evaluate_group(
    group: Group,
    displacements: Sequence[DisplacementField],
    warped_labels: Optional[Sequence[Volume]] = None,
    velocities: Optional[Sequence[VectorVolume]] = None,
    region: Optional[Mask] = None,
    group_id: str = "group",
    runtime_s: float = math.nan,
    squaring_steps: int = DEFAULT_SQUARING_STEPS,
) -> MetricsReport:
    """
    1 グループの全指標を計算

    Args:
        group: 元の (ワープ前の) グループ
        displacements: 各時点の変位場 (本ツールの結果または外部ツールの出力)
        warped_labels: ワープ済みラベル。省略時は group.labels をワープする
        velocities: 速度場 (あれば逆変換の一貫性を計算し、中心性も速度場で測る)
        region: 評価領域。省略時はワープ済みマスクの共通部分 H
        group_id: レポートの group 列
        runtime_s: 実行時間の列

    Returns:
        MetricsReport
    """
    if len(displacements) != group.n:
        raise ImageGridError(f"変位場の数 {len(displacements)} がグループの時点数 {group.n} と一致しません")
    require_common_grid([group.grid] + [u.grid for u in displacements], "evaluate_group")

    warped_images = [warp(image, u) for image, u in zip(group.images, displacements)]
    average = mean_image(warped_images)
    if region is None:
        region = common_mask([warp_mask(mask, u) for mask, u in zip(group.masks, displacements)])

    if warped_labels is None and group.labels is not None:
        classes = [0, *TISSUE_CLASSES.values()]
        warped_labels = [warp_labels(labels, u, classes) for labels, u in zip(group.labels, displacements)]

    report = evaluate_fields(
        displacements,
        region,
        warped_labels=warped_labels,
        velocities=velocities,
        group_id=group_id,
        runtime_s=runtime_s,
        squaring_steps=squaring_steps,
    )
    report.ssim = float(np.mean([ssim_masked(image, average, region) for image in warped_images]))
    logger.info(
        f"{group_id}: SSIM={report.ssim:.4f}, centrality={report.centrality:.3e}, "
        f"folding={report.folding_pct:.3e}%"
    )
    return report


def evaluate_fields(
    displacements: Sequence[DisplacementField],
    region: Mask,
    warped_labels: Optional[Sequence[Volume]] = None,
    velocities: Optional[Sequence[VectorVolume]] = None,
    group_id: str = "group",
    runtime_s: float = math.nan,
    squaring_steps: int = DEFAULT_SQUARING_STEPS,
) -> MetricsReport:
    """画像を使わない指標 (Dice・中心性・ヤコビアン・逆変換の一貫性)。SSIM は NaN のまま。"""
    require_common_grid([u.grid for u in displacements] + [region.grid], "evaluate_fields")
    _require_nonempty(region, "evaluate_fields")

    report = MetricsReport(group=group_id, runtime_s=float(runtime_s))
    if warped_labels is not None:
        report.dice_csf = group_dice(warped_labels, TISSUE_CLASSES["csf"], region)
        report.dice_gm = group_dice(warped_labels, TISSUE_CLASSES["gm"], region)
        report.dice_wm = group_dice(warped_labels, TISSUE_CLASSES["wm"], region)
        report.dice_tumor = group_dice(warped_labels, TISSUE_CLASSES["tumor"])

    # 速度場があれば対数領域 (平均速度場) で測る。変位場のみなら変位で測る
    report.centrality = centrality(velocities if velocities is not None else displacements, region)
    report.centrality_mean_norm = centrality(displacements, region, mode="mean_of_norms")

    folds = [smoothness(jacobian_determinant(u), region) for u in displacements]
    report.folding_pct = float(np.mean([f for f, _ in folds]))
    report.jacobian_sd = float(np.mean([sd for _, sd in folds]))

    if velocities is not None:
        consistency = [inverse_consistency(v, region, squaring_steps) for v in velocities]
        report.inverse_consistency_mean = float(np.mean([mean for mean, _ in consistency]))
        report.inverse_consistency_max = float(np.max([worst for _, worst in consistency]))
    return report


def write_reports_csv(reports: Sequence[MetricsReport], path) -> None:
    """1 行 1 グループで CSV 出力 (列順は REPORT_COLUMNS で固定)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for report in reports:
            writer.writerow(report.to_row())


def read_reports_csv(path) -> List[MetricsReport]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return [MetricsReport.from_row(row) for row in csv.DictReader(f)]


def summarize_cohort(reports: Sequence[MetricsReport]) -> Dict[str, Tuple[float, float]]:
    """列ごとの (平均, 標準偏差)。NaN の行は除外する。"""
    summary = {}
    for column in REPORT_COLUMNS[1:]:
        values = np.array([getattr(r, column) for r in reports], dtype=np.float64)
        values = values[np.isfinite(values)]
        if values.size == 0:
            summary[column] = (math.nan, math.nan)
        else:
            summary[column] = (float(values.mean()), float(values.std()))
    return summary


@dataclass
class Comparison:
    """1 指標分の対応のある比較"""
    column: str
    n_pairs: int
    mean_a: float
    mean_b: float
    statistic: float
    p_value: float

    def significant(self, alpha: float = 0.05) -> bool:
        return math.isfinite(self.p_value) and self.p_value < alpha


def compare_reports(
    reports_a: Sequence[MetricsReport],
    reports_b: Sequence[MetricsReport],
    columns: Optional[Sequence[str]] = None,
) -> List[Comparison]:
    """
    2 手法のレポートを group 列で対応付け、指標ごとに Wilcoxon 検定

    Returns:
        指標ごとの Comparison (検定できない指標は p = NaN)
    """
    by_group_b = {r.group: r for r in reports_b}
    pairs = [(a, by_group_b[a.group]) for a in reports_a if a.group in by_group_b]
    if len(pairs) < 2:
        raise StatisticsError(f"対応の取れたグループが少なすぎます: {len(pairs)}")

    comparisons = []
    for column in columns or REPORT_COLUMNS[1:]:
        x = np.array([getattr(a, column) for a, _ in pairs], dtype=np.float64)
        y = np.array([getattr(b, column) for _, b in pairs], dtype=np.float64)
        valid = np.isfinite(x) & np.isfinite(y)
        statistic, p_value = math.nan, math.nan
        if valid.sum() >= 2:
            try:
                statistic, p_value = wilcoxon_signed_rank(x[valid], y[valid])
            except StatisticsError as e:
                logger.warning(f"{column}: {e}")
        comparisons.append(Comparison(
            column=column,
            n_pairs=int(valid.sum()),
            mean_a=float(x[valid].mean()) if valid.any() else math.nan,
            mean_b=float(y[valid].mean()) if valid.any() else math.nan,
            statistic=statistic,
            p_value=p_value,
        ))
    return comparisons


def format_table(reports: Sequence[MetricsReport]) -> str:
    """人間向けの表"""
    lines = ["=" * 60, "評価レポート", "=" * 60]
    for report in reports:
        lines.append(f"\n【{report.group}】")
        for column in REPORT_COLUMNS[1:]:
            lines.append(f"  {column:<26} {getattr(report, column):.6g}")
    if len(reports) > 1:
        lines.append("\n【コホート集計 (平均 ± SD)】")
        for column, (mean, sd) in summarize_cohort(reports).items():
            lines.append(f"  {column:<26} {mean:.6g} ± {sd:.3g}")
    lines.append("\n" + "=" * 60)
    return "\n".join(lines)


def format_comparison(comparisons: Sequence[Comparison], alpha: float = 0.05) -> str:
    lines = ["=" * 60, f"Wilcoxon 符号順位検定 (両側, p < {alpha})", "=" * 60]
    lines.append(f"  {'指標':<26} {'n':>3} {'A':>12} {'B':>12} {'W':>8} {'p':>10}")
    for c in comparisons:
        mark = " *" if c.significant(alpha) else ""
        lines.append(
            f"  {c.column:<26} {c.n_pairs:>3} {c.mean_a:>12.5g} {c.mean_b:>12.5g} "
            f"{c.statistic:>8.4g} {c.p_value:>10.4g}{mark}"
        )
    lines.append("=" * 60)
    return "\n".join(lines)

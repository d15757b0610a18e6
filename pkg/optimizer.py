"""
速度場の直接最適化

グループごとに速度場 v_i を Adam で最適化する。各反復の後に
Σ_i v_i = 0 へ射影し (中心化)、暗黙の平均空間を群の重心に保つ。

多段処理:
    1 段目はダウンサンプリングした画像で v¹ を推定し、mm 単位のまま
    細グリッドへアップサンプリングする。2 段目は元の解像度の画像を
    exp(up(v¹) + v²) で一度だけワープし、残差 v² を推定する。
    最終的な速度場は v = up(v¹) + v²。
"""

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from config import RegistrationConfig, StageConfig
from errors import NumericalFailureError
from image_core import Grid, VectorVolume, require_common_grid, upsample_to
from loss import Group, GroupObjective
from transform import DisplacementField, exponentiate, field_to_tensor, tensor_to_field

logger = logging.getLogger(__name__)
progress_logger = logging.getLogger("longreg.progress")


@dataclass
class StageTrace:
    """
    1 段分の損失の履歴

    Attributes:
        stage: 段番号 (1 始まり)
        downsample_levels: この段のダウンサンプリング回数
        losses: 各反復の損失 (0 番目は初期値)
        accepted: 最良値を更新した反復の番号
        iterations: 実行した更新ステップ数
        converged: 収束判定で打ち切ったか
    """
    stage: int
    downsample_levels: int
    losses: List[float] = field(default_factory=list)
    accepted: List[int] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def best_loss(self) -> float:
        return min(self.losses) if self.losses else math.inf

    @property
    def accepted_losses(self) -> List[float]:
        return [self.losses[i] for i in self.accepted]


@dataclass
class RegistrationResult:
    """
    多段位置合わせの結果 (細グリッド)

    Attributes:
        velocities: 各時点の最終速度場 v_i [mm]
        displacements: 各時点の変位場 u_i = exp(v_i) [mm]
        traces: 段ごとの損失履歴
        wall_time: 実行時間 [秒]
    """
    velocities: List[VectorVolume]
    displacements: List[DisplacementField]
    traces: List[StageTrace]
    wall_time: float

    @property
    def iterations(self) -> List[int]:
        return [trace.iterations for trace in self.traces]

    @property
    def final_loss(self) -> float:
        return self.traces[-1].best_loss


def center_tensor(velocity: torch.Tensor) -> torch.Tensor:
    """(n, 3, ...) から時点方向の平均を引く"""
    return velocity - velocity.mean(dim=0, keepdim=True)


def center_velocities(velocities: Sequence[VectorVolume]) -> List[VectorVolume]:
    """
    v_i ← v_i - (1/n) Σ_j v_j

    Args:
        velocities: 同じグリッドの速度場

    Returns:
        平均が 0 になった速度場 (差 v_i - v_j は保存される)
    """
    grid = require_common_grid([v.grid for v in velocities], "center_velocities")
    stacked = np.stack([v.data for v in velocities])
    centered = stacked - stacked.mean(axis=0, keepdims=True)
    return [VectorVolume(data, grid) for data in centered]


def _has_converged(losses: Sequence[float], config: RegistrationConfig) -> bool:
    window = config.tolerance_window
    if len(losses) <= window:
        return False
    reference = losses[-1 - window]
    change = abs(reference - losses[-1])
    return change <= config.tolerance * max(abs(reference), 1e-12)


def _optimize_stage(
    objective: GroupObjective,
    residual: torch.Tensor,
    stage: StageConfig,
    config: RegistrationConfig,
    stage_index: int,
) -> Tuple[torch.Tensor, StageTrace]:
    """1 段分の Adam 反復。最良の反復の残差速度場を返す。"""
    trace = StageTrace(stage=stage_index, downsample_levels=stage.downsample_levels)
    residual = center_tensor(residual.detach()).clone().requires_grad_(True)
    optimizer = torch.optim.Adam(
        [residual],
        lr=stage.step_size,
        betas=(config.beta1, config.beta2),
        eps=config.adam_epsilon,
    )
    best = residual.detach().clone()

    for iteration in range(stage.max_iterations + 1):
        optimizer.zero_grad()
        total, breakdown = objective.evaluate(residual, iteration=iteration)
        if not math.isfinite(breakdown.total):
            raise NumericalFailureError(f"stage {stage_index} iteration {iteration} で損失が有限値ではありません")

        trace.losses.append(breakdown.total)
        progress_logger.info(f"PROG stage={stage_index} iter={iteration} loss={breakdown.total:.10f}")
        if not trace.accepted or breakdown.total < trace.losses[trace.accepted[-1]]:
            trace.accepted.append(iteration)
            best = residual.detach().clone()

        if iteration == stage.max_iterations:
            break
        if _has_converged(trace.losses, config):
            trace.converged = True
            break

        total.backward()
        optimizer.step()
        with torch.no_grad():
            residual.sub_(residual.mean(dim=0, keepdim=True))
        trace.iterations += 1

    if trace.iterations > 0 and trace.accepted == [0]:
        logger.warning(
            f"stage {stage_index}: {trace.iterations} 反復で初期値より損失が下がりませんでした。"
            f"step_size ({stage.step_size}) が大きすぎる可能性があります"
        )
    logger.info(
        f"stage {stage_index} 完了:{trace.iterations} 反復, 最良損失 {trace.best_loss:.6f}"
        + (" (収束)" if trace.converged else "")
    )
    return best, trace


def register_stage(
    group: Group,
    init_velocities: Sequence[VectorVolume],
    stage: StageConfig,
    config: RegistrationConfig,
    stage_index: int = 1,
) -> Tuple[List[VectorVolume], StageTrace]:
    """
    1 段分の最適化

    Args:
        group: この段のグリッド上のグループ
        init_velocities: 初期速度場 (同じグリッド)
        stage: 反復回数・ステップ幅
        config: 損失と Adam の定数

    Returns:
        (最良の反復の速度場, 損失履歴)
    """
    require_common_grid([group.grid] + [v.grid for v in init_velocities], "register_stage")
    objective = GroupObjective(group, config)
    initial = torch.stack([field_to_tensor(v) for v in init_velocities])
    best, trace = _optimize_stage(objective, initial, stage, config, stage_index)
    return [tensor_to_field(v, group.grid) for v in best], trace


def _upsample_all(velocities: Sequence[VectorVolume], grid: Grid) -> torch.Tensor:
    return torch.stack([field_to_tensor(upsample_to(v, grid)) for v in velocities])


def register_multistage(group: Group, config: RegistrationConfig) -> RegistrationResult:
    """
    多段 (粗 -> 細) のグループワイズ位置合わせ

    Args:
        group: 細グリッド上のグループ
        config: 段スケジュールを含む設定

    Returns:
        RegistrationResult
    """
    torch.manual_seed(config.seed)
    start = time.perf_counter()
    traces: List[StageTrace] = []
    current: Optional[List[VectorVolume]] = None

    for stage_index, stage in enumerate(config.stages, 1):
        stage_group = group.downsampled(stage.downsample_levels)
        grid = stage_group.grid
        logger.info(
            f"stage {stage_index}/{len(config.stages)} 開始: dims={grid.dims}, "
            f"spacing={grid.spacing}, max_iterations={stage.max_iterations}"
        )
        base = None if current is None else center_tensor(_upsample_all(current, grid))
        objective = GroupObjective(stage_group, config, base_velocities=base)
        residual, trace = _optimize_stage(
            objective,
            torch.zeros(objective.shape, dtype=torch.float64),
            stage,
            config,
            stage_index,
        )
        traces.append(trace)
        total = residual if base is None else base + residual
        current = [tensor_to_field(v, grid) for v in center_tensor(total)]

    if not current[0].grid.matches(group.grid, atol=0.0):
        current = [upsample_to(v, group.grid) for v in current]
    velocities = center_velocities(current)
    displacements = [exponentiate(v, config.squaring_steps) for v in velocities]

    wall_time = time.perf_counter() - start
    logger.info(f"位置合わせ完了: {wall_time:.1f} 秒, 最終損失 {traces[-1].best_loss:.6f}")
    return RegistrationResult(velocities, displacements, traces, wall_time)


def make_permutations(n_scans: int, group_size: int = 3) -> List[Tuple[int, ...]]:
    """
    被験者の時点から group_size 個を選ぶ全組み合わせ (辞書順)

    Args:
        n_scans: 被験者のスキャン数
        group_size: 1 グループの時点数

    Returns:
        時点インデックスのタプルのリスト
    """
    if group_size < 2:
        raise ValueError(f"group_size は 2 以上が必要です: {group_size}")
    if n_scans < group_size:
        raise ValueError(f"スキャン数 {n_scans} が group_size {group_size} より少ないです")
    return list(itertools.combinations(range(n_scans), group_size))


def register_cohort(
    groups: Sequence[Group],
    config: RegistrationConfig,
    show_progress: bool = True,
) -> List[RegistrationResult]:
    """複数グループを独立に位置合わせ (状態は共有しない)"""
    results = []
    for group in tqdm(groups, desc="グループ", disable=not show_progress):
        results.append(register_multistage(group, config))
    return results

"""
位置合わせの設定モデル

config.yaml の内容を pydantic で検証する。未知のキーは拒否する。
"""

from typing import Any, Dict, List

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigError


class StageConfig(BaseModel):
    """1 段分の最適化スケジュール"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    downsample_levels: int = Field(..., ge=0, description="downsample2 を適用する回数")
    max_iterations: int = Field(..., ge=0)
    step_size: float = Field(..., gt=0.0, description="Adam の学習率 [mm]")


def default_stages() -> List[StageConfig]:
    return [
        StageConfig(downsample_levels=1, max_iterations=300, step_size=0.5),
        StageConfig(downsample_levels=0, max_iterations=150, step_size=0.25),
    ]


class RegistrationConfig(BaseModel):
    """位置合わせ 1 回分の全パラメータ"""
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    lambda_: float = Field(default=1.0, alias="lambda", ge=0.0, description="正則化の重み λ")
    window_radius: int = Field(default=4, ge=1, description="LNCC の箱型窓の半径")
    squaring_steps: int = Field(default=7, ge=1)
    variance_epsilon: float = Field(default=1e-5, gt=0.0, description="LNCC の局所分散の下限")
    use_mask: bool = Field(default=True, description="false なら H_i をすべて全域マスクにする")
    stages: List[StageConfig] = Field(default_factory=default_stages, min_length=1)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(default=1e-8, gt=0.0)
    tolerance: float = Field(default=1e-5, ge=0.0, description="収束判定の相対損失変化")
    tolerance_window: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)

    @field_validator("stages")
    @classmethod
    def _coarse_to_fine(cls, stages: List[StageConfig]) -> List[StageConfig]:
        levels = [stage.downsample_levels for stage in stages]
        if any(later > earlier for earlier, later in zip(levels, levels[1:])):
            raise ValueError(f"downsample_levels は粗い段から細かい段へ非増加である必要があります: {levels}")
        return stages

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(by_alias=True)

    def replace(self, **updates: Any) -> "RegistrationConfig":
        """一部のフィールドを差し替えた設定 (検証付き)"""
        values = self.model_dump()
        values.update(updates)
        return RegistrationConfig.model_validate(values)


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        location = ".".join(str(item) for item in error["loc"])
        parts.append(f"{location}: {error['msg']}")
    return "; ".join(parts)


def parse_config(text: str, source: str = "<config>") -> RegistrationConfig:
    """
    YAML テキストを RegistrationConfig に変換

    Args:
        text: YAML テキスト
        source: エラーメッセージ用の名前

    Returns:
        検証済みの設定
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise ConfigError(
                f"{source}: YAML のパースに失敗しました (line {mark.line + 1}, column {mark.column + 1}): "
                f"{getattr(exc, 'problem', exc)}"
            ) from exc
        raise ConfigError(f"{source}: YAML のパースに失敗しました: {exc}") from exc

    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: 設定のトップレベルはマッピングである必要があります")

    try:
        return RegistrationConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: 設定値が不正です: {_format_validation_error(exc)}") from exc

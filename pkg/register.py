#!/usr/bin/env python3
"""
グループワイズ位置合わせ

同一被験者の n 時点の画像を、腫瘍を除いた正常組織マスク付きで
暗黙の平均空間へ同時に位置合わせする。

使用方法:
    python register.py --config config.yaml \
        --image t0.nii.gz --image t1.nii.gz --image t2.nii.gz \
        --mask m0.nii.gz --mask m1.nii.gz --mask m2.nii.gz \
        --out ./output/registration
"""

import argparse
import logging
import sys
from pathlib import Path

from tqdm import tqdm

from cli import make_parser, run_command
from config import RegistrationConfig
from errors import UsageError
from loss import common_mask, mean_image
from optimizer import register_multistage
from snapshot import render_snapshot
from transform import warp, warp_mask
from volume_io import read_config, read_group, write_loss_trace, write_volume

logger = logging.getLogger(__name__)


def cmd_register(args: argparse.Namespace) -> None:
    if len(args.image) != len(args.mask):
        raise UsageError(f"--image ({len(args.image)} 個) と --mask ({len(args.mask)} 個) の数が一致しません")
    if len(args.image) < 2:
        raise UsageError(f"--image は 2 個以上必要です ({len(args.image)} 個)")

    config = read_config(args.config) if args.config else RegistrationConfig()
    group = read_group(args.image, args.mask)
    logger.info(f"グループ: n={group.n}, dims={group.grid.dims}, spacing={group.grid.spacing}")

    result = register_multistage(group, config)

    warped = [warp(image, u) for image, u in zip(group.images, result.displacements)]
    average = mean_image(warped)
    region = common_mask([warp_mask(mask, u) for mask, u in zip(group.masks, result.displacements)])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    members = zip(result.velocities, result.displacements, warped)
    for i, (velocity, displacement, image) in enumerate(tqdm(members, total=group.n, desc="保存", disable=args.quiet)):
        write_volume(out / f"velocity_{i:02d}.nii.gz", velocity, "float64")
        write_volume(out / f"displacement_{i:02d}.nii.gz", displacement, "float64")
        write_volume(out / f"warped_{i:02d}.nii.gz", image, "float32")
    write_volume(out / "mean_image.nii.gz", average, "float32")
    write_volume(out / "common_mask.nii.gz", region)
    write_loss_trace(out / "loss_trace.csv", result.traces)

    if args.snapshot:
        render_snapshot(warped, average, region, args.snapshot)

    logger.info(
        f"出力完了: {out} (共通領域 {region.count} ボクセル, "
        f"最終損失 {result.final_loss:.6f}, {result.wall_time:.1f} 秒)"
    )


def build_parser():
    parser = make_parser(
        "register.py",
        "正常組織マスク付きのグループワイズ微分同相位置合わせ",
        epilog="""
出力 (--out):
  velocity_XX.nii.gz      速度場 v_i [mm]
  displacement_XX.nii.gz  変位場 u_i = exp(v_i) [mm]
  warped_XX.nii.gz        ワープ済み画像 I_i ∘ T_i
  mean_image.nii.gz       平均画像
  common_mask.nii.gz      共通領域 H
  loss_trace.csv          stage,iteration,loss

終了コード: 0 成功 / 1 使い方の誤り / 2 データの誤り / 3 数値的な失敗
""",
    )
    parser.add_argument("--config", "-c", default=None, metavar="FILE", help="YAML 設定 (省略時は既定値)")
    parser.add_argument(
        "--image", "-i",
        action="append",
        required=True,
        metavar="FILE",
        help="時点の画像 (時点数だけ繰り返す。順番が出力番号になる)",
    )
    parser.add_argument(
        "--mask", "-m",
        action="append",
        required=True,
        metavar="FILE",
        help="正常組織マスク (--image と同じ順に繰り返す)",
    )
    parser.add_argument("--out", "-o", required=True, metavar="DIR", help="出力ディレクトリ")
    parser.add_argument("--snapshot", default=None, metavar="PNG", help="確認用スナップショットの出力先")
    return parser


def main(argv=None) -> int:
    return run_command(cmd_register, build_parser(), argv)


if __name__ == "__main__":
    sys.exit(main())

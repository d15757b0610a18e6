#!/usr/bin/env python3
"""
変形場の評価

位置合わせ結果 (本ツールまたは外部ツールの変位場) から指標を計算し、
MetricsReport の CSV を 1 行出力する。

使用方法:
    python evaluate.py \
        --field out/displacement_00.nii.gz --field out/displacement_01.nii.gz --field out/displacement_02.nii.gz \
        --labels labels_00.nii.gz --labels labels_01.nii.gz --labels labels_02.nii.gz \
        --image image_00.nii.gz --image image_01.nii.gz --image image_02.nii.gz \
        --mask out/common_mask.nii.gz --out report.csv
"""

import argparse
import logging
import math
import sys

from cli import make_parser, run_command
from errors import UsageError
from image_core import Mask
from loss import Group
from metrics import TISSUE_CLASSES, evaluate_fields, evaluate_group, format_table, write_reports_csv
from transform import DEFAULT_SQUARING_STEPS, warp_labels
from volume_io import read_field, read_mask, read_scalar

logger = logging.getLogger(__name__)


def _check_arity(name: str, values, n: int) -> None:
    if values and len(values) != n:
        raise UsageError(f"--{name} ({len(values)} 個) が --field ({n} 個) と一致しません")


def cmd_metrics(args: argparse.Namespace) -> None:
    n = len(args.field)
    if n < 2:
        raise UsageError(f"--field は 2 個以上必要です ({n} 個)")
    for name in ("labels", "image", "velocity"):
        _check_arity(name, getattr(args, name), n)

    displacements = [read_field(p) for p in args.field]
    region = read_mask(args.mask)
    velocities = [read_field(p) for p in args.velocity] if args.velocity else None
    labels = [read_scalar(p) for p in args.labels] if args.labels else None

    options = dict(
        velocities=velocities,
        region=region,
        group_id=args.group_id,
        runtime_s=args.runtime,
        squaring_steps=args.squaring_steps,
    )
    if args.image:
        images = [read_scalar(p) for p in args.image]
        group = Group(images=images, masks=[Mask.full(region.grid)] * n, labels=labels)
        report = evaluate_group(group, displacements, **options)
    else:
        warped_labels = None
        if labels is not None:
            classes = [0, *TISSUE_CLASSES.values()]
            warped_labels = [warp_labels(label, u, classes) for label, u in zip(labels, displacements)]
        options.pop("region")
        report = evaluate_fields(displacements, region, warped_labels=warped_labels, **options)

    write_reports_csv([report], args.out)
    print(format_table([report]))
    logger.info(f"出力完了: {args.out}")


def build_parser():
    parser = make_parser(
        "evaluate.py",
        "変位場から Dice・SSIM・中心性・折り畳み率などを計算",
        epilog="""
変位場の規約: 変位 (位置ではない)、mm、ワールド軸、pull-back
  warped(x) = I(x + u(x))。NIfTI の形状は (nx, ny, nz, 1, 3)。
--labels / --image はワープ前の各時点のファイルで、--field で平均空間へワープする。
--mask は平均空間の共通領域 H (register.py の common_mask.nii.gz)。
""",
    )
    parser.add_argument("--field", "-f", action="append", required=True, metavar="FILE", help="変位場 (時点数だけ繰り返す)")
    parser.add_argument("--labels", "-l", action="append", default=None, metavar="FILE", help="ワープ前のラベルマップ")
    parser.add_argument("--image", "-i", action="append", default=None, metavar="FILE", help="ワープ前の画像 (SSIM 用)")
    parser.add_argument("--velocity", action="append", default=None, metavar="FILE", help="速度場 (逆変換の一貫性用)")
    parser.add_argument("--mask", "-m", required=True, metavar="FILE", help="評価領域 H")
    parser.add_argument("--out", "-o", required=True, metavar="CSV", help="出力 CSV")
    parser.add_argument("--group-id", default="group", help="CSV の group 列 (デフォルト: group)")
    parser.add_argument("--runtime", type=float, default=math.nan, metavar="SEC", help="runtime_s 列に書く実行時間")
    parser.add_argument(
        "--squaring-steps",
        type=int,
        default=DEFAULT_SQUARING_STEPS,
        metavar="K",
        help=f"逆変換の一貫性で使う二乗回数 (デフォルト: {DEFAULT_SQUARING_STEPS})",
    )
    return parser


def main(argv=None) -> int:
    return run_command(cmd_metrics, build_parser(), argv)


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
合成データの生成

ファントムと正解速度場つきのグループを書き出す。

使用方法:
    python synthesize.py --dims 64 64 64 --n 3 --amplitude 6 --shift 0.2 --seed 1 --out ./output/synthetic
"""

import argparse
import logging
import sys
from pathlib import Path

from tqdm import tqdm

from cli import make_parser, run_command
from errors import UsageError
from snapshot import render_snapshot
from synth import make_group, make_phantom
from volume_io import write_volume

logger = logging.getLogger(__name__)

MIN_DIM = 8


def _validate(args: argparse.Namespace) -> None:
    if any(d < MIN_DIM for d in args.dims):
        raise UsageError(f"--dims は各軸 {MIN_DIM} 以上が必要です: {args.dims}")
    if any(s <= 0 for s in args.spacing):
        raise UsageError(f"--spacing は正の値が必要です: {args.spacing}")
    if args.n < 2:
        raise UsageError(f"--n は 2 以上が必要です: {args.n}")
    if args.amplitude < 0:
        raise UsageError(f"--amplitude は 0 以上が必要です: {args.amplitude}")
    if args.growth < 0:
        raise UsageError(f"--growth は 0 以上が必要です: {args.growth}")
    if not -1.0 <= args.shift <= 1.0:
        raise UsageError(f"--shift は -1 から 1 の範囲が必要です: {args.shift}")
    if args.sigma <= 0:
        raise UsageError(f"--sigma は正の値が必要です: {args.sigma}")


def cmd_synth(args: argparse.Namespace) -> None:
    _validate(args)
    phantom = make_phantom(args.dims, args.spacing, seed=args.seed)
    case = make_group(
        phantom,
        n=args.n,
        amplitude_mm=args.amplitude,
        tumor_growth=args.growth,
        intensity_shift=args.shift,
        seed=args.seed,
        smoothness_sigma_mm=args.sigma,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    group = case.group
    members = zip(group.images, group.masks, group.labels, case.true_velocities)
    for i, (image, mask, labels, velocity) in enumerate(tqdm(members, total=group.n, desc="保存", disable=args.quiet)):
        write_volume(out / f"image_{i:02d}.nii.gz", image, "float32")
        write_volume(out / f"mask_{i:02d}.nii.gz", mask)
        write_volume(out / f"labels_{i:02d}.nii.gz", labels, "uint8")
        write_volume(out / f"true_velocity_{i:02d}.nii.gz", velocity, "float64")
    write_volume(out / "phantom.nii.gz", phantom.image, "float32")
    write_volume(out / "phantom_labels.nii.gz", phantom.labels, "uint8")

    if args.snapshot:
        render_snapshot(group.images, phantom.image, None, args.snapshot)
    logger.info(f"出力完了: {out} (n={group.n}, dims={phantom.grid.dims})")


def build_parser():
    parser = make_parser(
        "synthesize.py",
        "正解変形つきの合成グループを生成",
        epilog="""
出力 (--out):
  image_XX.nii.gz, mask_XX.nii.gz, labels_XX.nii.gz, true_velocity_XX.nii.gz,
  phantom.nii.gz, phantom_labels.nii.gz
ラベル: 0 背景, 1 CSF, 2 GM, 3 WM, 4 腫瘍
""",
    )
    parser.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64], metavar=("NX", "NY", "NZ"))
    parser.add_argument("--spacing", type=float, nargs=3, default=[1.0, 1.0, 1.0], metavar=("SX", "SY", "SZ"), help="[mm]")
    parser.add_argument("--n", type=int, default=3, help="時点数 (デフォルト: 3)")
    parser.add_argument("--amplitude", type=float, default=6.0, help="ランダム速度場の最大ノルム [mm]")
    parser.add_argument("--growth", type=float, default=0.0, help="最終時点の腫瘍の膨張 [mm]")
    parser.add_argument("--shift", type=float, default=0.0, help="最終時点の腫瘍強度の変化 (レンジ比)")
    parser.add_argument("--sigma", type=float, default=8.0, help="速度場の平滑化 σ [mm]")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", "-o", required=True, metavar="DIR", help="出力ディレクトリ")
    parser.add_argument("--snapshot", default=None, metavar="PNG", help="確認用スナップショットの出力先")
    return parser


def main(argv=None) -> int:
    return run_command(cmd_synth, build_parser(), argv)


if __name__ == "__main__":
    sys.exit(main())

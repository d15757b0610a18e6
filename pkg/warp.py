#!/usr/bin/env python3
"""
変位場で画像をワープ (I ∘ T)

使用方法:
    python warp.py --image image_00.nii.gz --field out/displacement_00.nii.gz --out warped_00.nii.gz
    python warp.py --image labels_00.nii.gz --field out/displacement_00.nii.gz --out labels_w.nii.gz --labels
"""

import argparse
import logging
import sys

from cli import make_parser, run_command
from transform import warp, warp_labels
from volume_io import DATATYPES, read_field, read_scalar, write_volume

logger = logging.getLogger(__name__)


def cmd_warp(args: argparse.Namespace) -> None:
    image = read_scalar(args.image)
    field = read_field(args.field)
    if args.labels:
        warped = warp_labels(image, field)
        datatype = args.datatype or "uint8"
    else:
        warped = warp(image, field)
        datatype = args.datatype or "float32"
    write_volume(args.out, warped, datatype)
    logger.info(f"出力完了: {args.out}")


def build_parser():
    parser = make_parser("warp.py", "変位場 (mm, pull-back) で画像またはラベルをワープ")
    parser.add_argument("--image", "-i", required=True, metavar="FILE", help="入力画像")
    parser.add_argument("--field", "-f", required=True, metavar="FILE", help="変位場 (nx, ny, nz, 1, 3)")
    parser.add_argument("--out", "-o", required=True, metavar="FILE", help="出力ファイル")
    parser.add_argument("--labels", action="store_true", help="入力をラベルマップとして扱う (クラスごとの指示関数の最大)")
    parser.add_argument("--datatype", choices=list(DATATYPES), default=None, help="出力のデータ型")
    return parser


def main(argv=None) -> int:
    return run_command(cmd_warp, build_parser(), argv)


if __name__ == "__main__":
    sys.exit(main())

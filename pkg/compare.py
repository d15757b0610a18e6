#!/usr/bin/env python3
"""
2 手法のレポート CSV を比較 (Wilcoxon 符号順位検定)

使用方法:
    python compare.py --a mask_multistage.csv --b mask_only.csv
"""

import argparse
import sys

from cli import make_parser, run_command
from errors import UsageError
from metrics import REPORT_COLUMNS, compare_reports, format_comparison, read_reports_csv


def cmd_compare(args: argparse.Namespace) -> None:
    if not 0.0 < args.alpha < 1.0:
        raise UsageError(f"--alpha は 0 と 1 の間が必要です: {args.alpha}")
    unknown = [c for c in args.columns or [] if c not in REPORT_COLUMNS[1:]]
    if unknown:
        raise UsageError(f"未知の列です: {unknown}")

    try:
        reports_a, reports_b = read_reports_csv(args.a), read_reports_csv(args.b)
    except (OSError, ValueError) as e:
        raise UsageError(f"レポート CSV を読み込めません: {e}") from e
    comparisons = compare_reports(reports_a, reports_b, args.columns)
    print(format_comparison(comparisons, args.alpha))


def build_parser():
    parser = make_parser("compare.py", "group 列で対応付けた 2 手法の指標を検定")
    parser.add_argument("--a", required=True, metavar="CSV", help="手法 A のレポート")
    parser.add_argument("--b", required=True, metavar="CSV", help="手法 B のレポート")
    parser.add_argument("--alpha", type=float, default=0.05, help="有意水準 (デフォルト: 0.05)")
    parser.add_argument("--columns", nargs="+", default=None, metavar="COL", help="検定する列 (デフォルト: 全指標)")
    return parser


def main(argv=None) -> int:
    return run_command(cmd_compare, build_parser(), argv)


if __name__ == "__main__":
    sys.exit(main())

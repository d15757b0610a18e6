"""
コマンドライン共通部品

終了コード:
    0  成功
    1  使い方の誤り (引数・設定ファイル)
    2  データの誤り (グリッド不一致・壊れたファイル・合成パラメータ)
    3  数値的な失敗 (共通領域 H が空・損失が有限値でない)

進捗行は標準エラーに "PROG stage=<k> iter=<i> loss=<v>" の形式で出力する。
--quiet は通常のログと tqdm を止めるが、進捗行は止めない。

スレッド数は --threads、環境変数 LONGREG_NUM_THREADS (.env 可)、
利用可能なコア数の順に決める。
"""

import argparse
import logging
import os
import sys
from typing import Callable, List, Optional

import torch
from dotenv import load_dotenv

from errors import ConfigError, LongRegError, RegistrationError, UsageError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

THREADS_ENV = "LONGREG_NUM_THREADS"
PROGRESS_LOGGER = "longreg.progress"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


class CommandParser(argparse.ArgumentParser):
    """引数エラーを終了コード 2 ではなく UsageError にする"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def make_parser(prog: str, description: str, epilog: Optional[str] = None) -> CommandParser:
    parser = CommandParser(
        prog=prog,
        description=description,
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        metavar="N",
        help=f"torch のスレッド数 (デフォルト: ${THREADS_ENV} またはコア数)",
    )
    parser.add_argument(
        "--quiet", "-q",
        action="store_true",
        help="INFO ログと進捗バーを出さない (PROG 行は出力する)",
    )
    return parser


def setup_logging(quiet: bool = False) -> None:
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    root.setLevel(logging.WARNING if quiet else logging.INFO)

    progress = logging.getLogger(PROGRESS_LOGGER)
    for handler in list(progress.handlers):
        progress.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    progress.addHandler(handler)
    progress.setLevel(logging.INFO)
    progress.propagate = False


def resolve_threads(requested: Optional[int] = None) -> int:
    """--threads > $LONGREG_NUM_THREADS > コア数"""
    if requested is not None:
        value, source = requested, "--threads"
    else:
        load_dotenv()
        env = os.getenv(THREADS_ENV)
        if env is None or not env.strip():
            return os.cpu_count() or 1
        try:
            value, source = int(env), THREADS_ENV
        except ValueError:
            raise UsageError(f"{THREADS_ENV} は整数である必要があります: {env!r}")
    if value < 1:
        raise UsageError(f"{source} は 1 以上が必要です: {value}")
    return value


def configure_threads(requested: Optional[int] = None) -> int:
    threads = resolve_threads(requested)
    torch.set_num_threads(threads)
    logger.info(f"スレッド数: {threads}")
    return threads


def exit_code_for(exc: LongRegError) -> int:
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, RegistrationError):
        return EXIT_NUMERICAL
    return EXIT_DATA


def run_command(
    command: Callable[[argparse.Namespace], None],
    parser: CommandParser,
    argv: Optional[List[str]] = None,
) -> int:
    """
    引数を解析してコマンドを実行し、終了コードを返す

    LongRegError はログに出して終了コードへ変換する。それ以外の例外は
    バグとしてそのまま送出する。
    """
    setup_logging()
    try:
        args = parser.parse_args(argv)
        setup_logging(args.quiet)
        configure_threads(args.threads)
        command(args)
    except LongRegError as e:
        code = exit_code_for(e)
        logger.error(f"{type(e).__name__}: {e}")
        return code
    return EXIT_OK

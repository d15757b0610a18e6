"""
longreg 共通の例外クラス

CLI はこの階層を見て終了コードを決める (cli.py 参照)。
"""

from typing import Optional


class LongRegError(Exception):
    """longreg の全例外の基底クラス"""


class ImageGridError(LongRegError, ValueError):
    """グリッド不一致・不正な次元/スペーシング・非有限値"""


class RegistrationError(LongRegError, RuntimeError):
    """位置合わせ中の数値的な失敗"""


class EmptyCommonMaskError(RegistrationError):
    """共通マスク H が空 (マスク同士が重ならない)"""

    def __init__(self, message: str, iteration: Optional[int] = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration={iteration})"
        super().__init__(message)


class NumericalFailureError(RegistrationError):
    """損失が NaN/Inf になった"""


class SynthesisError(LongRegError, ValueError):
    """合成データの生成条件が fold-free の範囲を超えた"""


class StatisticsError(LongRegError, ValueError):
    """統計検定が定義できない入力"""


class ConfigError(LongRegError, ValueError):
    """設定ファイルのパース/検証エラー"""


class UsageError(LongRegError, ValueError):
    """コマンドライン引数の誤り"""


class VolumeIOError(LongRegError, OSError):
    """ボリュームファイルの読み書きエラー (パス付き)"""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{message}: {self.path}")


class BadMagicError(VolumeIOError):
    """NIfTI-1 のマジックまたはヘッダサイズが不正"""


class TruncatedVolumeError(VolumeIOError):
    """データ部がヘッダの宣言より短い"""


class UnsupportedDatatypeError(VolumeIOError):
    """未対応の datatype"""


class UnsupportedDimensionError(VolumeIOError):
    """未対応の次元構成"""

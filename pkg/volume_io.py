"""
ボリューム・設定・損失履歴の入出力

NIfTI-1 (.nii / .nii.gz) の読み書きは nibabel に任せ、読み込み前に
ヘッダの基本検査 (sizeof_hdr, magic, データ長) を行って壊れた
ファイルを区別できるエラーにする。

変位場の規約: 位置ではなく変位、mm、ワールド軸、pull-back
(warped(x) = I(x + u(x)))。intent は vector、形状は (nx, ny, nz, 1, 3)。
"""

import csv
import gzip
import logging
import zlib
from pathlib import Path
from typing import List, Optional, Sequence, Union

import nibabel as nib
import numpy as np

from config import RegistrationConfig, parse_config
from errors import (
    BadMagicError,
    ConfigError,
    TruncatedVolumeError,
    UnsupportedDatatypeError,
    UnsupportedDimensionError,
    VolumeIOError,
)
from image_core import Grid, Mask, VectorVolume, Volume
from loss import Group

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
NIFTI1_MAGIC = b"n+1\x00"

DATATYPES = {
    "uint8": np.dtype(np.uint8),
    "int16": np.dtype(np.int16),
    "int32": np.dtype(np.int32),
    "float32": np.dtype(np.float32),
    "float64": np.dtype(np.float64),
}
SUPPORTED_DTYPES = set(DATATYPES.values())

AnyVolume = Union[Volume, VectorVolume, Mask]


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise VolumeIOError(path, "ファイルが存在しません")
    raw = path.read_bytes()
    if raw[:2] != b"\x1f\x8b":
        return raw
    try:
        return gzip.decompress(raw)
    except (EOFError, zlib.error) as e:
        raise TruncatedVolumeError(path, f"gzip の展開に失敗しました: {e}") from e
    except gzip.BadGzipFile as e:
        raise BadMagicError(path, f"gzip ヘッダが不正です: {e}") from e


def _check_header(path: Path, raw: bytes) -> None:
    if len(raw) < HEADER_SIZE:
        raise TruncatedVolumeError(path, f"ヘッダが {len(raw)} バイトしかありません")
    sizes = (int.from_bytes(raw[:4], "little"), int.from_bytes(raw[:4], "big"))
    if HEADER_SIZE not in sizes:
        raise BadMagicError(path, f"sizeof_hdr が {HEADER_SIZE} ではありません")
    if raw[344:348] != NIFTI1_MAGIC:
        raise BadMagicError(path, f"単一ファイル NIfTI-1 の magic ではありません: {raw[344:348]!r}")


def _grid_from_affine(affine: np.ndarray, dims: Sequence[int]) -> Grid:
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    return Grid(dims=tuple(int(d) for d in dims), spacing=tuple(float(s) for s in spacing), affine=affine)


def read_volume(path) -> Union[Volume, VectorVolume]:
    """
    NIfTI-1 ファイルを読み込む

    スケーリング (scl_slope / scl_inter) を適用した float64 で返す。
    3 次元ならスカラー、(nx, ny, nz, 1, 3) ならベクトル場。

    Raises:
        BadMagicError, TruncatedVolumeError, UnsupportedDatatypeError,
        UnsupportedDimensionError: 壊れた・未対応のファイル
    """
    path = Path(path)
    raw = _read_bytes(path)
    _check_header(path, raw)

    try:
        image = nib.Nifti1Image.from_bytes(raw)
    except Exception as e:
        raise BadMagicError(path, f"NIfTI-1 ヘッダを解釈できません: {e}") from e
    header = image.header

    dtype = header.get_data_dtype()
    if dtype.newbyteorder("=") not in SUPPORTED_DTYPES:
        raise UnsupportedDatatypeError(path, f"未対応のデータ型です: {dtype}")

    shape = tuple(int(s) for s in header.get_data_shape())
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) == 3:
        vector = False
    elif len(shape) == 5 and shape[3] == 1 and shape[4] == 3:
        vector = True
    else:
        raise UnsupportedDimensionError(path, f"未対応の次元です: {header.get_data_shape()}")

    expected = int(header["vox_offset"]) + int(np.prod(shape)) * dtype.itemsize
    if len(raw) < expected:
        raise TruncatedVolumeError(path, f"データが不足しています ({len(raw)} < {expected} バイト)")

    data = image.get_fdata(dtype=np.float64)
    grid = _grid_from_affine(image.affine, shape[:3])
    if vector:
        return VectorVolume(data.reshape(*shape[:3], 3), grid)
    return Volume(data.reshape(shape), grid)


def read_scalar(path) -> Volume:
    volume = read_volume(path)
    if not isinstance(volume, Volume):
        raise UnsupportedDimensionError(path, "スカラーボリュームが必要です")
    return volume


def read_field(path) -> VectorVolume:
    volume = read_volume(path)
    if not isinstance(volume, VectorVolume):
        raise UnsupportedDimensionError(path, "ベクトル場 (nx, ny, nz, 1, 3) が必要です")
    return volume


def read_mask(path) -> Mask:
    """0/1 のボリュームをマスクとして読み込む"""
    volume = read_scalar(path)
    return Mask(volume.data, volume.grid)


def write_volume(path, vol: AnyVolume, datatype: str = "float32") -> None:
    """
    NIfTI-1 ファイルとして書き出す (.gz なら圧縮)

    整数型は四捨五入して保存する (スケーリングなし)。マスクは uint8 固定。

    Args:
        path: 出力パス
        vol: Volume / VectorVolume / Mask
        datatype: uint8, int16, int32, float32, float64
    """
    path = Path(path)
    if datatype not in DATATYPES:
        raise ValueError(f"未対応のデータ型です: {datatype} (対応: {', '.join(DATATYPES)})")
    dtype = DATATYPES["uint8"] if isinstance(vol, Mask) else DATATYPES[datatype]

    data = np.asarray(vol.data, dtype=np.float64)
    if isinstance(vol, VectorVolume):
        data = data[:, :, :, None, :]
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        rounded = np.rint(data)
        if rounded.min() < info.min or rounded.max() > info.max:
            raise ValueError(f"値が {datatype} の範囲外です")
        data = rounded.astype(dtype)
    else:
        data = np.asarray(data, dtype=dtype)

    image = nib.Nifti1Image(data, vol.grid.affine)
    image.header.set_data_dtype(dtype)
    image.header.set_xyzt_units("mm")
    if isinstance(vol, VectorVolume):
        image.header.set_intent("vector")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        nib.save(image, str(path))
    except OSError as e:
        raise VolumeIOError(path, f"書き込みに失敗しました: {e}") from e
    logger.debug(f"保存: {path} ({datatype})")


def read_config(path) -> RegistrationConfig:
    """YAML 設定ファイルを読み込んで検証"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: 設定ファイルを読み込めません: {e}") from e
    return parse_config(text, source=str(path))


def read_group(
    image_paths: Sequence,
    mask_paths: Sequence,
    label_paths: Optional[Sequence] = None,
) -> Group:
    """画像・マスク (・ラベル) のファイル列からグループを作成"""
    images = [read_scalar(p) for p in image_paths]
    masks = [read_mask(p) for p in mask_paths]
    labels = [read_scalar(p) for p in label_paths] if label_paths else None
    return Group(images=images, masks=masks, labels=labels)


def write_loss_trace(path, traces) -> None:
    """段ごとの損失履歴を stage,iteration,loss の CSV で出力"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "iteration", "loss"])
        for trace in traces:
            for iteration, loss in enumerate(trace.losses):
                writer.writerow([trace.stage, iteration, repr(float(loss))])


def read_loss_trace(path) -> List[tuple]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return [(int(row["stage"]), int(row["iteration"]), float(row["loss"])) for row in csv.DictReader(f)]

import gzip
from pathlib import Path

import nibabel as nib
import numpy as np
import pytest

from config import RegistrationConfig
from errors import (
    BadMagicError,
    ConfigError,
    TruncatedVolumeError,
    UnsupportedDatatypeError,
    UnsupportedDimensionError,
    VolumeIOError,
)
from image_core import Grid, Mask, VectorVolume, Volume
from optimizer import StageTrace
from volume_io import (
    read_config,
    read_field,
    read_group,
    read_loss_trace,
    read_mask,
    read_scalar,
    read_volume,
    write_loss_trace,
    write_volume,
)

REPO_ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = Path(__file__).resolve().parent / "data"

# tests/data/make_golden.sh のバイト配置と対応する範囲 (nibabel 固有の埋め値を除く)
GOLDEN_RANGES = {
    "dim": (40, 48),
    "datatype_bitpix": (70, 74),
    "pixdim": (80, 92),
    "vox_offset": (108, 112),
    "xyzt_units": (123, 124),
    "sform_code": (254, 256),
    "srow": (280, 328),
    "magic_extension": (344, 352),
}


@pytest.fixture
def anisotropic_grid():
    return Grid.from_spacing((6, 5, 4), (0.5, 1.0, 2.0), origin=(-3.0, 10.0, 4.0))


@pytest.fixture
def valid_nii(tmp_path, grid12):
    path = tmp_path / "valid.nii"
    write_volume(path, Volume(np.full(grid12.dims, 2.5), grid12))
    return path


class TestRoundtrip:
    def test_float64_bitwise(self, tmp_path, anisotropic_grid, rng):
        volume = Volume(rng.standard_normal(anisotropic_grid.dims), anisotropic_grid)
        path = tmp_path / "image.nii.gz"
        write_volume(path, volume, datatype="float64")
        loaded = read_scalar(path)
        assert np.array_equal(loaded.data, volume.data)
        assert np.array_equal(loaded.grid.affine, anisotropic_grid.affine)
        assert loaded.grid.spacing == (0.5, 1.0, 2.0)

    def test_vector_field(self, tmp_path, anisotropic_grid, rng):
        field = VectorVolume(rng.standard_normal((*anisotropic_grid.dims, 3)), anisotropic_grid)
        path = tmp_path / "displacement.nii.gz"
        write_volume(path, field, datatype="float64")
        loaded = read_field(path)
        assert np.array_equal(loaded.data, field.data)

        header = nib.load(str(path)).header
        assert header.get_data_shape() == (6, 5, 4, 1, 3)
        assert header.get_intent()[0] == "vector"
        assert header.get_xyzt_units()[0] == "mm"

    def test_mask_is_stored_as_uint8(self, tmp_path, grid12, rng):
        mask = Mask(rng.random(grid12.dims) > 0.5, grid12)
        path = tmp_path / "mask.nii.gz"
        write_volume(path, mask, datatype="float32")
        assert nib.load(str(path)).get_data_dtype() == np.uint8
        assert np.array_equal(read_mask(path).data, mask.data)

    def test_integer_labels_are_rounded(self, tmp_path, grid12):
        data = np.zeros(grid12.dims)
        data[2:5] = 3.0000001
        path = tmp_path / "labels.nii.gz"
        write_volume(path, Volume(data, grid12), datatype="uint8")
        loaded = read_scalar(path).data
        assert set(np.unique(loaded)) == {0.0, 3.0}

    def test_integer_out_of_range(self, tmp_path, grid12):
        with pytest.raises(ValueError):
            write_volume(tmp_path / "x.nii", Volume(np.full(grid12.dims, 300.0), grid12), datatype="uint8")

    def test_unknown_datatype(self, tmp_path, grid12):
        with pytest.raises(ValueError):
            write_volume(tmp_path / "x.nii", Volume(np.zeros(grid12.dims), grid12), datatype="float16")

    def test_constant_volume_bytes(self, valid_nii, grid12):
        raw = valid_nii.read_bytes()
        assert raw[344:348] == b"n+1\x00"
        values = np.frombuffer(raw[352:], dtype="<f4")
        assert values.size == grid12.size
        assert np.all(values == 2.5)


class TestReadExternal:
    def test_matches_nibabel(self, tmp_path, rng):
        affine = np.diag([0.5, 1.0, 2.0, 1.0])
        affine[:3, 3] = [1.0, -2.0, 3.0]
        data = rng.standard_normal((7, 6, 5)).astype(np.float32)
        path = tmp_path / "external.nii.gz"
        nib.save(nib.Nifti1Image(data, affine), str(path))

        loaded = read_scalar(path)
        assert np.array_equal(loaded.data, nib.load(str(path)).get_fdata(dtype=np.float64))
        assert loaded.spacing == (0.5, 1.0, 2.0)

    def test_trailing_unit_time_axis(self, tmp_path):
        path = tmp_path / "t1.nii"
        nib.save(nib.Nifti1Image(np.ones((4, 4, 4, 1), dtype=np.float32), np.eye(4)), str(path))
        assert read_scalar(path).dims == (4, 4, 4)

    def test_read_group(self, tmp_path, grid12, rng):
        images, masks = [], []
        for i in range(2):
            images.append(tmp_path / f"image_{i}.nii.gz")
            masks.append(tmp_path / f"mask_{i}.nii.gz")
            write_volume(images[-1], Volume(rng.standard_normal(grid12.dims), grid12))
            write_volume(masks[-1], Mask.full(grid12))
        group = read_group(images, masks)
        assert group.n == 2
        assert group.labels is None
        assert group.masks[0].count == grid12.size


def _golden_index():
    i, j, k = np.indices((2, 2, 2))
    return (i + 2 * j + 4 * k).astype(np.float64)


class TestGoldenFiles:
    @pytest.fixture
    def golden_grid(self):
        return Grid.from_spacing((2, 2, 2), (0.5, 1.0, 2.0), origin=(-3.0, 10.0, 4.0))

    def test_float32_decodes(self, golden_grid):
        loaded = read_scalar(DATA_DIR / "golden_2x2x2_float32.nii")
        assert np.array_equal(loaded.data, _golden_index() + 0.5)
        assert np.array_equal(loaded.grid.affine, golden_grid.affine)
        assert loaded.spacing == (0.5, 1.0, 2.0)

    def test_scaled_int16_decodes(self):
        loaded = read_scalar(DATA_DIR / "golden_2x2x2_int16_scaled.nii")
        assert np.array_equal(loaded.data, 2.0 * _golden_index() - 1.0)
        assert loaded.data[1, 1, 0] == 5.0

    def test_written_bytes_match(self, tmp_path, golden_grid):
        path = tmp_path / "written.nii"
        write_volume(path, Volume(_golden_index() + 0.5, golden_grid), datatype="float32")
        written = path.read_bytes()
        golden = (DATA_DIR / "golden_2x2x2_float32.nii").read_bytes()

        assert len(written) == len(golden)
        for name, (start, stop) in GOLDEN_RANGES.items():
            assert written[start:stop] == golden[start:stop], name
        assert written[352:] == golden[352:]


class TestCorruptFiles:
    def test_missing_file(self, tmp_path):
        with pytest.raises(VolumeIOError):
            read_volume(tmp_path / "missing.nii")

    def test_bad_magic(self, tmp_path, valid_nii):
        raw = bytearray(valid_nii.read_bytes())
        raw[344:348] = b"ni1\x00"
        path = tmp_path / "pair.nii"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            read_volume(path)

    def test_not_nifti(self, tmp_path):
        path = tmp_path / "notes.nii"
        path.write_bytes(b"this is not a volume" * 30)
        with pytest.raises(BadMagicError):
            read_volume(path)

    def test_truncated_data(self, tmp_path, valid_nii):
        path = tmp_path / "short.nii"
        path.write_bytes(valid_nii.read_bytes()[:1000])
        with pytest.raises(TruncatedVolumeError):
            read_volume(path)

    def test_truncated_header(self, tmp_path, valid_nii):
        path = tmp_path / "header.nii"
        path.write_bytes(valid_nii.read_bytes()[:100])
        with pytest.raises(TruncatedVolumeError):
            read_volume(path)

    def test_truncated_gzip(self, tmp_path, valid_nii):
        path = tmp_path / "short.nii.gz"
        path.write_bytes(gzip.compress(valid_nii.read_bytes())[:200])
        with pytest.raises(TruncatedVolumeError):
            read_volume(path)

    def test_unsupported_datatype(self, tmp_path):
        path = tmp_path / "int8.nii"
        nib.save(nib.Nifti1Image(np.zeros((4, 4, 4), dtype=np.int8), np.eye(4)), str(path))
        with pytest.raises(UnsupportedDatatypeError):
            read_volume(path)

    def test_unsupported_dimensions(self, tmp_path):
        path = tmp_path / "series.nii"
        nib.save(nib.Nifti1Image(np.zeros((4, 4, 4, 2), dtype=np.float32), np.eye(4)), str(path))
        with pytest.raises(UnsupportedDimensionError):
            read_volume(path)

    def test_scalar_where_field_expected(self, valid_nii):
        with pytest.raises(UnsupportedDimensionError):
            read_field(valid_nii)


class TestReadConfig:
    def _write(self, tmp_path, text):
        path = tmp_path / "config.yaml"
        path.write_text(text, encoding="utf-8")
        return path

    def test_empty_file_gives_defaults(self, tmp_path):
        assert read_config(self._write(tmp_path, "")) == RegistrationConfig()

    def test_shipped_config_matches_defaults(self):
        assert read_config(REPO_ROOT / "config.yaml") == RegistrationConfig()

    def test_partial_override(self, tmp_path):
        config = read_config(self._write(tmp_path, "lambda: 0.25\nuse_mask: false\n"))
        assert config.lambda_ == 0.25
        assert config.use_mask is False
        assert config.window_radius == 4

    def test_negative_lambda_names_field(self, tmp_path):
        with pytest.raises(ConfigError, match="lambda"):
            read_config(self._write(tmp_path, "lambda: -1\n"))

    def test_stage_field_path(self, tmp_path):
        text = "stages:\n  - downsample_levels: 0\n    max_iterations: 10\n    step_size: 0\n"
        with pytest.raises(ConfigError, match=r"stages\.0\.step_size"):
            read_config(self._write(tmp_path, text))

    def test_fine_to_coarse_stages_rejected(self, tmp_path):
        text = (
            "stages:\n"
            "  - {downsample_levels: 0, max_iterations: 5, step_size: 0.1}\n"
            "  - {downsample_levels: 1, max_iterations: 5, step_size: 0.1}\n"
        )
        with pytest.raises(ConfigError):
            read_config(self._write(tmp_path, text))

    def test_yaml_syntax_error_reports_line(self, tmp_path):
        with pytest.raises(ConfigError, match="line 2"):
            read_config(self._write(tmp_path, "lambda: 1.0\nwindow_radius: 4: 5\n"))

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError, match="learning_rate"):
            read_config(self._write(tmp_path, "learning_rate: 0.1\n"))

    def test_top_level_must_be_mapping(self, tmp_path):
        with pytest.raises(ConfigError):
            read_config(self._write(tmp_path, "- 1\n- 2\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_config(tmp_path / "nope.yaml")


def test_loss_trace_roundtrip(tmp_path):
    traces = [
        StageTrace(stage=1, downsample_levels=1, losses=[-0.5, -0.6, -0.61]),
        StageTrace(stage=2, downsample_levels=0, losses=[-0.7, -1.0 / 3.0]),
    ]
    path = tmp_path / "loss_trace.csv"
    write_loss_trace(path, traces)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "stage,iteration,loss"
    assert lines[-1] == "2,1,-0.3333333333333333"
    assert read_loss_trace(path) == [
        (1, 0, -0.5), (1, 1, -0.6), (1, 2, -0.61), (2, 0, -0.7), (2, 1, -1.0 / 3.0),
    ]

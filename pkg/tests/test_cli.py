import os
import re

import numpy as np
import pytest

import compare
import evaluate
import register
import synthesize
import warp as warp_cli
from cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, THREADS_ENV, exit_code_for, resolve_threads
from errors import (
    BadMagicError,
    ConfigError,
    EmptyCommonMaskError,
    ImageGridError,
    NumericalFailureError,
    StatisticsError,
    SynthesisError,
    UsageError,
)
from image_core import Grid, Mask, VectorVolume, Volume, smooth_array
from loss import Group
from metrics import MetricsReport, evaluate_group, read_reports_csv, write_reports_csv
from transform import exponentiate
from volume_io import read_field, read_loss_trace, read_mask, read_scalar, write_volume

N = 3
PROG_LINE = re.compile(r"^PROG stage=(\d+) iter=(\d+) loss=(\S+)$", re.MULTILINE)

TINY_CONFIG = """\
lambda: 1.0
window_radius: 2
stages:
  - {downsample_levels: 1, max_iterations: 3, step_size: 0.5}
  - {downsample_levels: 0, max_iterations: 2, step_size: 0.25}
"""


def _paths(directory, prefix, n=N):
    return [directory / f"{prefix}_{i:02d}.nii.gz" for i in range(n)]


def _repeat(flag, paths):
    args = []
    for path in paths:
        args += [flag, str(path)]
    return args


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    code = synthesize.main([
        "--dims", "24", "24", "24", "--n", str(N), "--amplitude", "2", "--sigma", "6",
        "--seed", "1", "--out", str(out), "-q",
    ])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "tiny.yaml"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


def _register_args(synthetic, out, config, images=None, masks=None):
    return [
        "--config", str(config),
        *_repeat("--image", images or _paths(synthetic, "image")),
        *_repeat("--mask", masks or _paths(synthetic, "mask")),
        "--out", str(out),
        "-q",
    ]


def _smooth_volume(grid, seed):
    noise = np.random.default_rng(seed).standard_normal(grid.dims)
    data = smooth_array(noise, grid.spacing, 2.0)
    return Volume(100.0 * (data - data.min()) / (data.max() - data.min()), grid)


class TestRegisterCommand:
    def test_writes_outputs_and_progress(self, tmp_path, synthetic, tiny_config, capfd):
        out = tmp_path / "registration"
        assert register.main(_register_args(synthetic, out, tiny_config)) == EXIT_OK

        for prefix in ("velocity", "displacement", "warped"):
            for path in _paths(out, prefix):
                assert path.exists()
        for name in ("mean_image.nii.gz", "common_mask.nii.gz", "loss_trace.csv"):
            assert (out / name).exists()

        progress = [(int(s), int(i), float(v)) for s, i, v in PROG_LINE.findall(capfd.readouterr().err)]
        trace = read_loss_trace(out / "loss_trace.csv")
        assert [(s, i) for s, i, _ in progress] == [(s, i) for s, i, _ in trace]
        assert {s for s, _, _ in trace} == {1, 2}
        for (_, _, shown), (_, _, stored) in zip(progress, trace):
            assert abs(shown - stored) <= 5e-11

        velocities = [read_field(p) for p in _paths(out, "velocity")]
        assert np.abs(sum(v.data for v in velocities)).max() < 1e-10
        assert read_mask(out / "common_mask.nii.gz").count > 0

    def test_identical_images_do_not_move(self, tmp_path, tiny_config):
        grid = Grid.from_spacing((16, 16, 16))
        image = tmp_path / "image.nii.gz"
        mask = tmp_path / "mask.nii.gz"
        write_volume(image, _smooth_volume(grid, 3), "float64")
        write_volume(mask, Mask.full(grid))
        out = tmp_path / "out"
        args = _register_args(None, out, tiny_config, images=[image] * N, masks=[mask] * N)
        assert register.main(args) == EXIT_OK
        for path in _paths(out, "displacement"):
            assert read_field(path).norm().max() < 1e-3

    def test_mismatched_counts(self, tmp_path, synthetic, tiny_config):
        masks = _paths(synthetic, "mask")[:2]
        assert register.main(_register_args(synthetic, tmp_path, tiny_config, masks=masks)) == EXIT_USAGE

    def test_invalid_config(self, tmp_path, synthetic):
        config = tmp_path / "bad.yaml"
        config.write_text("lambda: -1\n", encoding="utf-8")
        assert register.main(_register_args(synthetic, tmp_path / "out", config)) == EXIT_USAGE

    def test_unknown_flag(self, tmp_path, synthetic, tiny_config):
        args = _register_args(synthetic, tmp_path, tiny_config) + ["--iterations", "5"]
        assert register.main(args) == EXIT_USAGE

    def test_grid_mismatch(self, tmp_path, synthetic, tiny_config):
        odd = tmp_path / "odd.nii.gz"
        write_volume(odd, Volume(np.zeros((20, 24, 24)), Grid.from_spacing((20, 24, 24))))
        images = _paths(synthetic, "image")[:2] + [odd]
        assert register.main(_register_args(synthetic, tmp_path / "out", tiny_config, images=images)) == EXIT_DATA

    def test_missing_file(self, tmp_path, synthetic, tiny_config):
        images = _paths(synthetic, "image")[:2] + [tmp_path / "missing.nii.gz"]
        assert register.main(_register_args(synthetic, tmp_path / "out", tiny_config, images=images)) == EXIT_DATA

    def test_disjoint_masks(self, tmp_path, tiny_config):
        grid = Grid.from_spacing((16, 16, 16))
        images, masks = [], []
        for i in range(2):
            images.append(tmp_path / f"image_{i}.nii.gz")
            masks.append(tmp_path / f"mask_{i}.nii.gz")
            write_volume(images[-1], _smooth_volume(grid, i))
            half = np.zeros(grid.dims, dtype=bool)
            half[:8] = True
            write_volume(masks[-1], Mask(half if i == 0 else ~half, grid))
        args = _register_args(None, tmp_path / "out", tiny_config, images=images, masks=masks)
        assert register.main(args) == EXIT_NUMERICAL


class TestMetricsCommand:
    def _zero_fields(self, directory, grid):
        paths = _paths(directory, "zero")
        for path in paths:
            write_volume(path, VectorVolume.zeros(grid), "float64")
        return paths

    def test_identity_registration(self, tmp_path, synthetic):
        grid = read_scalar(synthetic / "phantom.nii.gz").grid
        fields = self._zero_fields(tmp_path, grid)
        mask = tmp_path / "full.nii.gz"
        write_volume(mask, Mask.full(grid))
        report_path = tmp_path / "report.csv"
        code = evaluate.main([
            *_repeat("--field", fields),
            *_repeat("--labels", [synthetic / "phantom_labels.nii.gz"] * N),
            *_repeat("--image", [synthetic / "phantom.nii.gz"] * N),
            *_repeat("--velocity", fields),
            "--mask", str(mask), "--out", str(report_path), "-q",
        ])
        assert code == EXIT_OK
        (report,) = read_reports_csv(report_path)
        assert report.dice_csf == report.dice_gm == report.dice_wm == report.dice_tumor == 1.0
        assert report.ssim == pytest.approx(1.0, abs=1e-9)
        assert report.centrality == 0.0
        assert report.folding_pct == 0.0
        assert report.inverse_consistency_max == 0.0

    def test_matches_in_process_evaluation(self, tmp_path, synthetic):
        truths = [read_field(p) for p in _paths(synthetic, "true_velocity")]
        fields, velocities = _paths(tmp_path, "displacement"), _paths(tmp_path, "velocity")
        for truth, field, velocity in zip(truths, fields, velocities):
            write_volume(velocity, -truth, "float64")
            write_volume(field, exponentiate(-truth), "float64")
        mask = synthetic / "mask_00.nii.gz"
        report_path = tmp_path / "report.csv"
        code = evaluate.main([
            *_repeat("--field", fields),
            *_repeat("--velocity", velocities),
            *_repeat("--labels", _paths(synthetic, "labels")),
            *_repeat("--image", _paths(synthetic, "image")),
            "--mask", str(mask), "--out", str(report_path), "--group-id", "s1", "-q",
        ])
        assert code == EXIT_OK
        (from_cli,) = read_reports_csv(report_path)

        region = read_mask(mask)
        group = Group(
            images=[read_scalar(p) for p in _paths(synthetic, "image")],
            masks=[Mask.full(region.grid)] * N,
            labels=[read_scalar(p) for p in _paths(synthetic, "labels")],
        )
        expected = evaluate_group(
            group,
            [read_field(p) for p in fields],
            velocities=[read_field(p) for p in velocities],
            region=region,
            group_id="s1",
        )
        assert from_cli.group == "s1"
        for column, value in expected.to_row().items():
            if column == "group" or np.isnan(float(value)):
                continue
            assert getattr(from_cli, column) == pytest.approx(float(value), abs=1e-12)

    def test_folded_field_is_reported(self, tmp_path):
        grid = Grid.from_spacing((16, 16, 16))
        x = np.arange(16, dtype=np.float64)[:, None, None] * np.ones((1, 16, 16))
        data = np.zeros((*grid.dims, 3))
        data[..., 0] = np.where((x >= 4) & (x <= 10), -2.0 * x, 0.0)
        fields = [tmp_path / "fold.nii.gz", tmp_path / "zero.nii.gz"]
        write_volume(fields[0], VectorVolume(data, grid), "float64")
        write_volume(fields[1], VectorVolume.zeros(grid), "float64")
        mask = tmp_path / "mask.nii.gz"
        write_volume(mask, Mask.full(grid))
        report_path = tmp_path / "report.csv"
        code = evaluate.main([*_repeat("--field", fields), "--mask", str(mask), "--out", str(report_path), "-q"])
        assert code == EXIT_OK
        (report,) = read_reports_csv(report_path)
        assert report.folding_pct > 0.0
        assert np.isnan(report.ssim)

    def test_arity_mismatch(self, tmp_path, synthetic):
        grid = read_scalar(synthetic / "phantom.nii.gz").grid
        fields = self._zero_fields(tmp_path, grid)
        code = evaluate.main([
            *_repeat("--field", fields),
            *_repeat("--labels", _paths(synthetic, "labels")[:2]),
            "--mask", str(synthetic / "mask_00.nii.gz"), "--out", str(tmp_path / "r.csv"), "-q",
        ])
        assert code == EXIT_USAGE


class TestSynthCommand:
    def test_true_velocities_sum_to_zero(self, synthetic):
        total = sum(read_field(p).data for p in _paths(synthetic, "true_velocity"))
        assert np.abs(total).max() < 1e-12

    def test_zero_amplitude_gives_identical_images(self, tmp_path):
        out = tmp_path / "flat"
        code = synthesize.main(["--dims", "16", "16", "16", "--amplitude", "0", "--out", str(out), "-q"])
        assert code == EXIT_OK
        first, *rest = [read_scalar(p).data for p in _paths(out, "image")]
        for other in rest:
            assert np.array_equal(first, other)

    def test_invalid_member_count(self, tmp_path):
        assert synthesize.main(["--n", "1", "--out", str(tmp_path), "-q"]) == EXIT_USAGE

    def test_excessive_deformation(self, tmp_path):
        code = synthesize.main([
            "--dims", "24", "24", "24", "--amplitude", "60", "--sigma", "2", "--out", str(tmp_path), "-q",
        ])
        assert code == EXIT_DATA


class TestWarpCommand:
    def test_zero_field_is_identity(self, tmp_path, synthetic):
        grid = read_scalar(synthetic / "phantom.nii.gz").grid
        field = tmp_path / "zero.nii.gz"
        write_volume(field, VectorVolume.zeros(grid), "float64")
        out = tmp_path / "warped.nii.gz"
        source = synthetic / "image_00.nii.gz"
        assert warp_cli.main(["-i", str(source), "-f", str(field), "-o", str(out), "-q"]) == EXIT_OK
        assert np.allclose(read_scalar(out).data, read_scalar(source).data, atol=1e-4)

    def test_labels_keep_class_codes(self, tmp_path, synthetic):
        field = tmp_path / "field.nii.gz"
        write_volume(field, exponentiate(-read_field(synthetic / "true_velocity_00.nii.gz")), "float64")
        out = tmp_path / "labels.nii.gz"
        args = ["-i", str(synthetic / "labels_00.nii.gz"), "-f", str(field), "-o", str(out), "--labels", "-q"]
        assert warp_cli.main(args) == EXIT_OK
        assert set(np.unique(read_scalar(out).data)) <= {0.0, 1.0, 2.0, 3.0, 4.0}

    def test_field_grid_mismatch(self, tmp_path, synthetic):
        field = tmp_path / "small.nii.gz"
        write_volume(field, VectorVolume.zeros(Grid.from_spacing((8, 8, 8))), "float64")
        args = ["-i", str(synthetic / "image_00.nii.gz"), "-f", str(field), "-o", str(tmp_path / "w.nii.gz"), "-q"]
        assert warp_cli.main(args) == EXIT_DATA


class TestCompareCommand:
    def _write(self, path, names, offset):
        reports = [MetricsReport(group=g, dice_gm=0.7 + 0.02 * i + offset) for i, g in enumerate(names)]
        write_reports_csv(reports, path)
        return path

    def test_paired_reports(self, tmp_path, capsys):
        names = [f"g{i}" for i in range(6)]
        a = self._write(tmp_path / "a.csv", names, 0.05)
        b = self._write(tmp_path / "b.csv", names, 0.0)
        assert compare.main(["--a", str(a), "--b", str(b), "--columns", "dice_gm", "-q"]) == EXIT_OK
        assert "dice_gm" in capsys.readouterr().out

    def test_unpaired_reports(self, tmp_path):
        a = self._write(tmp_path / "a.csv", ["a0", "a1", "a2"], 0.0)
        b = self._write(tmp_path / "b.csv", ["b0", "b1", "b2"], 0.0)
        assert compare.main(["--a", str(a), "--b", str(b), "-q"]) == EXIT_DATA

    def test_unknown_column(self, tmp_path):
        a = self._write(tmp_path / "a.csv", ["g0", "g1"], 0.0)
        assert compare.main(["--a", str(a), "--b", str(a), "--columns", "accuracy", "-q"]) == EXIT_USAGE

    def test_missing_report(self, tmp_path):
        a = self._write(tmp_path / "a.csv", ["g0", "g1"], 0.0)
        assert compare.main(["--a", str(a), "--b", str(tmp_path / "none.csv"), "-q"]) == EXIT_USAGE


class TestThreads:
    def test_flag_wins(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert resolve_threads(2) == 2

    def test_environment(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert resolve_threads() == 3

    def test_default_is_core_count(self, monkeypatch, tmp_path):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        monkeypatch.chdir(tmp_path)
        assert resolve_threads() == (os.cpu_count() or 1)

    def test_invalid_values(self, monkeypatch):
        with pytest.raises(UsageError):
            resolve_threads(0)
        monkeypatch.setenv(THREADS_ENV, "many")
        with pytest.raises(UsageError):
            resolve_threads()


@pytest.mark.parametrize(
    "error, code",
    [
        (UsageError("x"), EXIT_USAGE),
        (ConfigError("x"), EXIT_USAGE),
        (ImageGridError("x"), EXIT_DATA),
        (BadMagicError("f.nii", "x"), EXIT_DATA),
        (SynthesisError("x"), EXIT_DATA),
        (StatisticsError("x"), EXIT_DATA),
        (EmptyCommonMaskError("x", 0), EXIT_NUMERICAL),
        (NumericalFailureError("x"), EXIT_NUMERICAL),
    ],
)
def test_exit_codes(error, code):
    assert exit_code_for(error) == code


def test_pipeline_is_deterministic(tmp_path, tiny_config):
    reports = []
    for run in ("a", "b"):
        root = tmp_path / run
        synth_args = ["--dims", "16", "16", "16", "--amplitude", "1.5", "--sigma", "5", "--seed", "3"]
        assert synthesize.main([*synth_args, "--out", str(root / "synthetic"), "-q"]) == EXIT_OK
        out = root / "registration"
        assert register.main(_register_args(root / "synthetic", out, tiny_config)) == EXIT_OK
        report = root / "report.csv"
        code = evaluate.main([
            *_repeat("--field", _paths(out, "displacement")),
            *_repeat("--velocity", _paths(out, "velocity")),
            *_repeat("--labels", _paths(root / "synthetic", "labels")),
            *_repeat("--image", _paths(root / "synthetic", "image")),
            "--mask", str(out / "common_mask.nii.gz"), "--out", str(report), "-q",
        ])
        assert code == EXIT_OK
        reports.append(report.read_bytes())
    assert reports[0] == reports[1]

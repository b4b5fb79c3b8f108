"""Tests for the command-line interface."""

import json
from pathlib import Path
from typing import List

import pandas as pd
import pytest
from click.testing import CliRunner, Result

from remseq.cli import exit_code_for, main
from remseq.errors import (
    ConfigError,
    DataError,
    GeometryError,
    ModelFormatError,
    NumericalError,
)

TINY_CONFIG = """\
region:
  r_max: 16.0
  step: 1.0
model:
  d_model: 8
  n_layers: 1
  n_heads: 2
  d_ff: 16
  max_seq: 16
  dropout: 0.0
pretrain:
  epochs: 1
  n_directions: 16
  batch_size: 8
finetune:
  epochs: 1
  batch_size: 8
kriging:
  neighborhood_k: 8
  lag_width_m: 2.0
  max_lag_m: 16.0
synth:
  altitudes: {A: 5.0, B: 8.0}
  n_per_slice: 20
  half_extent_m: 8.0
dataset:
  altitudes: {A: 5.0, B: 8.0}
grid:
  lower: [-8.0, -8.0, 2.0]
  upper: [8.0, 8.0, 10.0]
  cell: [4.0, 4.0, 4.0]
log_level: WARNING
"""


@pytest.fixture
def config_path(tmp_path: Path) -> Path:
    """Tiny run configuration."""
    path = tmp_path / "run.yaml"
    path.write_text(TINY_CONFIG)
    return path


def _run(config: Path, out: Path, args: List[str]) -> Result:
    runner = CliRunner()
    return runner.invoke(
        main,
        ["--config", str(config), "--out", str(out), *args],
        env={"REM_CONFIG": None, "REM_LOG_LEVEL": None},
    )


def test_exit_code_categories() -> None:
    """Test each error family maps to its exit code."""
    assert exit_code_for(ConfigError("x")) == 2
    assert exit_code_for(DataError("x")) == 3
    assert exit_code_for(GeometryError("x")) == 3
    assert exit_code_for(NumericalError("x")) == 4
    assert exit_code_for(ModelFormatError("x")) == 5
    assert exit_code_for(RuntimeError("x")) == 1


class TestCheck:
    """The check command."""

    def test_valid_config(self, config_path: Path, tmp_path: Path) -> None:
        """Test a valid config prints its summary."""
        result = _run(config_path, tmp_path / "out", ["check"])
        assert result.exit_code == 0, result.output
        assert "Configuration validation successful!" in result.output
        assert "Kriging K: 8" in result.output

    def test_invalid_config_exit_code(self, tmp_path: Path) -> None:
        """Test a cross-section mismatch exits with code 2."""
        path = tmp_path / "bad.yaml"
        path.write_text("region:\n  r_max: 16.0\nmodel:\n  max_seq: 32\n")
        result = _run(path, tmp_path / "out", ["check"])
        assert result.exit_code == 2

    def test_rmax_flag_updates_sequence_length(
        self, config_path: Path, tmp_path: Path
    ) -> None:
        """Test --rmax keeps model.max_seq consistent."""
        result = _run(config_path, tmp_path / "out", ["check", "--rmax", "32"])
        assert result.exit_code == 0, result.output
        assert "r_max=32.0" in result.output

    def test_bad_altitudes_flag(
        self, config_path: Path, tmp_path: Path
    ) -> None:
        """Test malformed --altitudes is a usage error."""
        result = _run(
            config_path, tmp_path / "out", ["check", "--altitudes", "A50"]
        )
        assert result.exit_code == 2


def test_synth_is_deterministic(config_path: Path, tmp_path: Path) -> None:
    """Test repeated synth runs give byte-identical outputs."""
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        result = _run(config_path, out, ["--seed", "5", "synth"])
        assert result.exit_code == 0, result.output

    data = (first / "measurements.csv").read_bytes()
    assert data == (second / "measurements.csv").read_bytes()
    frame = pd.read_csv(first / "measurements.csv")
    assert len(frame) == 40
    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seeds"]["seed"] == 5
    assert "measurements.csv" in manifest["outputs"]


class TestEvaluate:
    """The evaluate command."""

    def test_metrics_written(self, config_path: Path, tmp_path: Path) -> None:
        """Test metrics files for aligned prediction and truth CSVs."""
        pred, truth = tmp_path / "pred.csv", tmp_path / "truth.csv"
        pred.write_text("rsrp_dbm\n1\n2\n4\n")
        truth.write_text("rsrp_dbm\n1\n2\n3\n")
        out = tmp_path / "out"
        result = _run(
            config_path,
            out,
            ["evaluate", "--pred", str(pred), "--truth", str(truth)],
        )
        assert result.exit_code == 0, result.output
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["r_squared"] == pytest.approx(0.5)
        assert metrics["n_points"] == 3
        assert (out / "metrics.csv").is_file()

    def test_missing_column(self, config_path: Path, tmp_path: Path) -> None:
        """Test a missing value column exits with code 3."""
        pred, truth = tmp_path / "pred.csv", tmp_path / "truth.csv"
        pred.write_text("value\n1\n")
        truth.write_text("rsrp_dbm\n1\n")
        result = _run(
            config_path,
            tmp_path / "out",
            ["evaluate", "--pred", str(pred), "--truth", str(truth)],
        )
        assert result.exit_code == 3


class TestPredictErrors:
    """Categorized failures of the predict command."""

    def test_missing_checkpoint(
        self, config_path: Path, tmp_path: Path
    ) -> None:
        """Test an unset checkpoint is a configuration error."""
        queries = tmp_path / "q.csv"
        queries.write_text("x,y,z\n1,2,3\n")
        result = _run(
            config_path,
            tmp_path / "out",
            ["predict", "--queries", str(queries)],
        )
        assert result.exit_code == 2

    def test_corrupt_checkpoint(
        self, config_path: Path, tmp_path: Path
    ) -> None:
        """Test a damaged checkpoint exits with code 5."""
        ckpt = tmp_path / "bad.ckpt"
        ckpt.write_bytes(b"RSEQ" + b"\x00" * 32)
        queries = tmp_path / "q.csv"
        queries.write_text("x,y,z\n1,2,3\n")
        result = _run(
            config_path,
            tmp_path / "out",
            ["predict", "--checkpoint", str(ckpt), "--queries", str(queries)],
        )
        assert result.exit_code == 5


def test_full_pipeline(config_path: Path, tmp_path: Path) -> None:
    """Test synth, both stages, prediction, kriging and export."""
    out = tmp_path / "run"
    data = out / "measurements.csv"
    queries = tmp_path / "queries.csv"
    queries.write_text("x,y,z\n1,2,5\n-3,4,8\n6,-6,5\n")

    steps = [
        ["synth"],
        ["pretrain"],
        [
            "finetune",
            "--checkpoint",
            str(out / "stage1.ckpt"),
            "--data",
            str(data),
        ],
        [
            "predict",
            "--checkpoint",
            str(out / "stage2.ckpt"),
            "--queries",
            str(queries),
            "--workers",
            "2",
        ],
        ["krige", "--data", str(data), "--queries", str(queries)],
        ["correlate", "--data", str(data)],
        ["export", "--checkpoint", str(out / "stage2.ckpt")],
    ]
    for args in steps:
        result = _run(config_path, out, args)
        assert result.exit_code == 0, f"{args[0]}: {result.output}"

    for name in (
        "stage1.ckpt",
        "pretrain_report.csv",
        "stage2.ckpt",
        "finetune_report.csv",
        "test.csv",
        "stage_metrics.csv",
        "variogram.json",
        "correlogram.csv",
        "rem_grid.json",
        "rem_grid.bin",
    ):
        assert (out / name).is_file(), name

    predictions = pd.read_csv(out / "predictions.csv")
    assert list(predictions.columns) == ["x", "y", "z", "rsrp_dbm"]
    assert len(predictions) == 3
    kriged = pd.read_csv(out / "kriging.csv")
    assert list(kriged.columns) == ["x", "y", "z", "rsrp_dbm", "variance"]
    stages = pd.read_csv(out / "stage_metrics.csv")
    assert stages["label"].tolist() == ["stage1", "stage2"]
    header = json.loads((out / "rem_grid.json").read_text())
    assert header["shape"] == [4, 4, 2]


def test_pretrain_checkpoint_is_reproducible(
    config_path: Path, tmp_path: Path
) -> None:
    """Test the same seed gives a byte-identical checkpoint."""
    for name in ("a", "b"):
        result = _run(config_path, tmp_path / name, ["pretrain"])
        assert result.exit_code == 0, result.output
    first = (tmp_path / "a" / "stage1.ckpt").read_bytes()
    assert first == (tmp_path / "b" / "stage1.ckpt").read_bytes()

"""Tests for configuration management."""

from pathlib import Path

import pytest
from pydantic import ValidationError

from remseq.config import (
    AntennaPattern,
    ChannelConfig,
    GridConfig,
    KrigingConfig,
    ModelConfig,
    RegionConfig,
    RunConfig,
    StageConfig,
)
from remseq.errors import ConfigError


def test_region_config_defaults() -> None:
    """Test region config with defaults."""
    config = RegionConfig()
    assert config.r_max == 500.0
    assert config.step == 1.0
    assert config.angular_res == 0.1
    assert config.n_bins == 500


def test_region_config_validation() -> None:
    """Test r_max must be a whole number of steps."""
    with pytest.raises(ValidationError):
        RegionConfig(r_max=10.0, step=3.0)
    with pytest.raises(ValidationError):
        RegionConfig(r_max=-1.0)


def test_channel_config_defaults() -> None:
    """Test channel config with defaults."""
    config = ChannelConfig()
    assert config.tx_power_dbm == 40.0
    assert config.carrier_hz == 3.51e9
    assert config.antenna.kind == "isotropic"
    assert config.shadowing is None


def test_model_config_heads() -> None:
    """Test d_model must divide across heads."""
    assert ModelConfig(d_model=64, n_heads=8).head_dim == 8
    with pytest.raises(ValidationError):
        ModelConfig(d_model=65, n_heads=8)


def test_stage_defaults() -> None:
    """Test the two training stages carry their own defaults."""
    stage1 = StageConfig.pretrain_defaults()
    assert (stage1.loss, stage1.lr_schedule) == ("mse", "lwsrd")
    assert (stage1.lr_max, stage1.lr_min) == (5e-4, 1e-4)
    assert (stage1.batch_size, stage1.epochs) == (16, 10)
    assert stage1.mask_ratio == 0.3
    assert stage1.loss_on_masked_only is False

    stage2 = StageConfig.finetune_defaults()
    assert (stage2.loss, stage2.lr_schedule) == ("smooth_l1", "step_decay")
    assert (stage2.lr_max, stage2.lr_min) == (5e-5, 1e-5)
    assert (stage2.batch_size, stage2.epochs) == (4, 100)


def test_partial_stage_sections_keep_stage_defaults() -> None:
    """Test a partial stage section only overrides what it names."""
    config = RunConfig.from_dict(
        {"pretrain": {"epochs": 2}, "finetune": {"epochs": 3}}
    )
    assert (config.pretrain.stage, config.pretrain.epochs) == ("pretrain", 2)
    assert config.finetune.stage == "finetune"
    assert config.finetune.loss == "smooth_l1"
    assert config.finetune.epochs == 3
    config.validate_config()


def test_stage_lr_range_validation() -> None:
    """Test lr_min may not exceed lr_max."""
    with pytest.raises(ValidationError):
        StageConfig(lr_max=1e-5, lr_min=1e-4)


def test_kriging_neighborhood_minimum() -> None:
    """Test neighborhood_k must be at least 3."""
    assert KrigingConfig().neighborhood_k == 64
    with pytest.raises(ValidationError):
        KrigingConfig(neighborhood_k=2)


def test_unknown_keys_rejected() -> None:
    """Test every section forbids unknown keys."""
    with pytest.raises(ValidationError):
        RegionConfig(rmax=500.0)  # type: ignore[call-arg]
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"region": {"r_max": 500.0, "bogus": 1}})


def test_table_antenna_requires_grid() -> None:
    """Test a table pattern needs a full-sphere grid."""
    with pytest.raises(ValidationError):
        AntennaPattern(kind="table")
    with pytest.raises(ValidationError):
        AntennaPattern(
            kind="table",
            table_phi=[-3.0, 3.0],
            table_theta=[0.0, 1.0],
            table_gain_db=[[0.0, 0.0], [0.0, 0.0]],
        )


def test_antenna_table_from_csv(tmp_path: Path) -> None:
    """Test loading a long-form antenna table."""
    path = tmp_path / "antenna.csv"
    rows = ["phi,theta,gain_db"]
    for phi in (-3.0, 0.0, 3.0):
        for theta in (0.0, 3.141592653589793):
            rows.append(f"{phi},{theta},{phi + theta}")
    path.write_text("\n".join(rows) + "\n")

    pattern = AntennaPattern.from_table_csv(path)
    assert pattern.kind == "table"
    assert pattern.table_phi == [-3.0, 0.0, 3.0]
    assert pattern.table_gain_db is not None
    assert pattern.table_gain_db[2][1] == pytest.approx(3.0 + 3.14159265359)


def test_grid_config_validation() -> None:
    """Test grid cells must be positive."""
    with pytest.raises(ValidationError):
        GridConfig(cell=(10.0, 0.0, 10.0))


def test_run_config() -> None:
    """Test complete run configuration."""
    config = RunConfig()
    assert config.log_level == "INFO"
    assert config.model.max_seq == config.region.n_bins
    config.validate_config()


def test_log_level_validation() -> None:
    """Test log level validation."""
    with pytest.raises(ValidationError):
        RunConfig(log_level="INVALID")
    assert RunConfig(log_level="debug").log_level == "DEBUG"


def test_validate_config_collects_every_error() -> None:
    """Test cross-section checks are all reported at once."""
    config = RunConfig.from_dict(
        {
            "region": {"r_max": 100.0, "step": 1.0},
            "dataset": {"split_ratios": [0.5, 0.2, 0.2]},
            "synth": {"altitudes": {"A": 150.0}},
        }
    )
    with pytest.raises(ConfigError) as excinfo:
        config.validate_config()
    message = str(excinfo.value)
    assert message.startswith("Configuration validation failed:")
    assert "model.max_seq" in message
    assert "split_ratios" in message
    assert "synth.altitudes[A]" in message


def test_geodetic_mapping_needs_origin() -> None:
    """Test lat/lon input requires a BS origin."""
    config = RunConfig.from_dict(
        {
            "dataset": {
                "schema_mapping": {
                    "x": None,
                    "y": None,
                    "z": None,
                    "lat": "lat",
                    "lon": "lon",
                    "alt": "alt",
                }
            }
        }
    )
    with pytest.raises(ConfigError, match="bs_origin"):
        config.validate_config()


def test_yaml_round_trip(tmp_path: Path) -> None:
    """Test dump_yaml and from_file agree."""
    config = RunConfig.from_dict(
        {
            "region": {"r_max": 64.0, "step": 1.0},
            "model": {"d_model": 8, "n_heads": 2, "max_seq": 64},
            "channel": {"shadowing": {"sigma_db": 4.0, "seed": 3}},
            "seed": 11,
        }
    )
    path = tmp_path / "run.yaml"
    config.dump_yaml(path)

    loaded = RunConfig.from_file(path)
    assert loaded == config
    assert loaded.channel.shadowing is not None
    assert loaded.channel.shadowing.sigma_db == 4.0


def test_from_file_errors(tmp_path: Path) -> None:
    """Test unreadable or malformed YAML raises ConfigError."""
    with pytest.raises(ConfigError, match="Cannot read"):
        RunConfig.from_file(tmp_path / "missing.yaml")

    bad = tmp_path / "bad.yaml"
    bad.write_text("region: [unclosed\n")
    with pytest.raises(ConfigError, match="Invalid YAML"):
        RunConfig.from_file(bad)

    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42\n")
    with pytest.raises(ConfigError, match="mapping"):
        RunConfig.from_file(scalar)


def test_get_summary() -> None:
    """Test the display summary is a flat dict."""
    summary = RunConfig().get_summary()
    assert summary["region"] == "r_max=500.0 step=1.0"
    assert summary["kriging_k"] == 64
    assert summary["rsrp_floor_dbm"] == -120.0
    assert all(not isinstance(v, dict) for v in summary.values())

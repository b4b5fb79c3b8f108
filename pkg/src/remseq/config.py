"""Configuration management for remseq."""

import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    ValidationInfo,
    field_validator,
    model_validator,
)

from .errors import ConfigError

VALID_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


class _Section(BaseModel):
    """Base for every config section: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


class RegionConfig(_Section):
    """Spherical region of interest around the BS."""

    r_max: float = Field(
        default=500.0, gt=0, description="Maximum range of interest (m)"
    )
    step: float = Field(default=1.0, gt=0, description="Radial step (m)")
    angular_res: float = Field(
        default=0.1, gt=0, description="Angular bin width (rad)"
    )

    @model_validator(mode="after")  # type: ignore[misc]
    def validate_divisible(self) -> "RegionConfig":
        """Require r_max to be a whole number of radial steps."""
        ratio = self.r_max / self.step
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(
                f"r_max ({self.r_max}) must be a whole multiple of "
                f"step ({self.step})"
            )
        return self

    @property
    def n_bins(self) -> int:
        """Number of radial bins (the sequence length)."""
        return int(round(self.r_max / self.step))


class AntennaPattern(_Section):
    """BS antenna gain pattern A_dB(phi, theta)."""

    kind: Literal["isotropic", "parametric", "table"] = Field(
        default="isotropic", description="Pattern family"
    )
    peak_gain_dbi: float = Field(
        default=0.0, description="Peak (boresight) gain in dBi"
    )
    boresight_phi: float = Field(
        default=0.0, description="Boresight azimuth (rad)"
    )
    boresight_theta: float = Field(
        default=math.pi / 2,
        ge=0.0,
        le=math.pi,
        description="Boresight inclination from +z (rad)",
    )
    beamwidth_az: float = Field(
        default=math.radians(65.0),
        gt=0,
        description="Azimuth 3 dB beamwidth (rad)",
    )
    beamwidth_el: float = Field(
        default=math.radians(30.0),
        gt=0,
        description="Elevation 3 dB beamwidth (rad)",
    )
    front_to_back_db: float = Field(
        default=30.0, ge=0, description="Front-to-back ratio (dB)"
    )
    table_phi: Optional[List[float]] = Field(
        default=None, description="Ascending azimuth grid (rad)"
    )
    table_theta: Optional[List[float]] = Field(
        default=None, description="Ascending inclination grid (rad)"
    )
    table_gain_db: Optional[List[List[float]]] = Field(
        default=None, description="Gain samples, shape (len(phi), len(theta))"
    )

    @model_validator(mode="after")  # type: ignore[misc]
    def validate_table(self) -> "AntennaPattern":
        """A table pattern must carry a grid covering the full sphere."""
        if self.kind != "table":
            return self
        if (
            self.table_phi is None
            or self.table_theta is None
            or self.table_gain_db is None
        ):
            raise ValueError(
                "table antenna requires table_phi, table_theta and "
                "table_gain_db"
            )
        phi, theta = self.table_phi, self.table_theta
        if len(phi) < 2 or len(theta) < 2:
            raise ValueError("table grid needs at least 2x2 samples")
        if any(b <= a for a, b in zip(phi, phi[1:])) or any(
            b <= a for a, b in zip(theta, theta[1:])
        ):
            raise ValueError("table grid axes must be strictly ascending")
        # azimuth wraps around, so the grid only has to span one period
        if phi[0] < -math.pi - 1e-9 or phi[-1] > math.pi + 1e-9:
            raise ValueError("table_phi must lie within [-pi, pi]")
        if phi[-1] - phi[0] > 2 * math.pi + 1e-9:
            raise ValueError("table_phi spans more than one period")
        if abs(theta[0]) > 1e-9 or abs(theta[-1] - math.pi) > 1e-9:
            raise ValueError("table_theta must span exactly [0, pi]")
        if len(self.table_gain_db) != len(phi) or any(
            len(row) != len(theta) for row in self.table_gain_db
        ):
            raise ValueError(
                "table_gain_db shape must be (len(table_phi), "
                "len(table_theta))"
            )
        return self

    @classmethod
    def from_table_csv(cls, path: Union[str, Path]) -> "AntennaPattern":
        """Load a tabulated pattern from a long-form CSV.

        The file has columns ``phi``, ``theta`` (radians) and ``gain_db``
        with one row per grid node.
        """
        import pandas as pd

        frame = pd.read_csv(path)
        missing = {"phi", "theta", "gain_db"} - set(frame.columns)
        if missing:
            raise ConfigError(
                f"Antenna table {path} is missing columns: {sorted(missing)}"
            )
        grid = frame.pivot_table(
            index="phi", columns="theta", values="gain_db"
        ).sort_index(axis=0).sort_index(axis=1)
        if grid.isna().to_numpy().any():
            raise ConfigError(f"Antenna table {path} has missing grid nodes")
        return cls(
            kind="table",
            table_phi=[float(v) for v in grid.index],
            table_theta=[float(v) for v in grid.columns],
            table_gain_db=grid.to_numpy(dtype=float).tolist(),
        )


class ShadowingConfig(_Section):
    """Spatially correlated log-normal shadowing (SF_dB)."""

    sigma_db: float = Field(default=6.0, ge=0, description="Std dev (dB)")
    corr_length_m: float = Field(
        default=50.0, gt=0, description="Exponential correlation length (m)"
    )
    seed: int = Field(default=0, ge=0, description="RNG seed")


class NoiseConfig(_Section):
    """Additive Gaussian measurement noise."""

    sigma_db: float = Field(default=0.0, ge=0, description="Std dev (dB)")
    seed: int = Field(default=0, ge=0, description="RNG seed")


class ChannelConfig(_Section):
    """Deterministic channel used for synthesis."""

    tx_power_dbm: float = Field(
        default=40.0, description="BS transmit power P_b (dBm)"
    )
    carrier_hz: float = Field(
        default=3.51e9, gt=0, description="Carrier frequency f_c (Hz)"
    )
    antenna: AntennaPattern = Field(default_factory=AntennaPattern)
    shadowing: Optional[ShadowingConfig] = Field(
        default=None, description="Optional correlated shadowing"
    )


class ModelConfig(_Section):
    """Transformer encoder hyperparameters."""

    d_model: int = Field(default=64, gt=0, description="Embedding width")
    n_layers: int = Field(default=6, ge=1, description="Encoder layers")
    n_heads: int = Field(default=8, ge=1, description="Attention heads")
    d_ff: int = Field(default=256, gt=0, description="Feed-forward width")
    max_seq: int = Field(
        default=500, gt=0, description="Sequence length (radial bins)"
    )
    dropout: float = Field(
        default=0.1, ge=0.0, lt=1.0, description="Training dropout"
    )
    activation: Literal["gelu", "relu"] = Field(
        default="gelu", description="Feed-forward nonlinearity"
    )
    positional_encoding: bool = Field(
        default=True, description="Add the sinusoidal positional table"
    )

    @model_validator(mode="after")  # type: ignore[misc]
    def validate_heads(self) -> "ModelConfig":
        """d_model must split evenly across heads."""
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by "
                f"n_heads ({self.n_heads})"
            )
        return self

    @property
    def head_dim(self) -> int:
        """Per-head width."""
        return self.d_model // self.n_heads


class StageConfig(_Section):
    """Hyperparameters of one training stage."""

    stage: Literal["pretrain", "finetune"] = "pretrain"
    loss: Literal["mse", "smooth_l1"] = "mse"
    lr_schedule: Literal["lwsrd", "step_decay"] = "lwsrd"
    lr_max: float = Field(default=5e-4, gt=0, description="Peak LR")
    lr_min: float = Field(default=1e-4, gt=0, description="Floor LR")
    batch_size: int = Field(default=16, ge=1)
    epochs: int = Field(default=10, ge=0)
    mask_ratio: float = Field(
        default=0.3, ge=0.0, le=1.0, description="Stage-1 mask ratio"
    )
    loss_on_masked_only: bool = Field(
        default=False,
        description="Stage-1 loss over masked positions only",
    )
    warmup_frac: float = Field(default=0.1, gt=0.0, lt=1.0)
    n_drops: int = Field(default=4, ge=1, description="Step-decay drops")
    smooth_l1_beta: float = Field(default=1.0, gt=0)
    grad_clip: float = Field(
        default=1.0, gt=0, description="Global gradient-norm clip"
    )
    n_directions: int = Field(
        default=2000, ge=1, description="Stage-1 synthetic directions"
    )
    theta_margin: float = Field(
        default=0.1,
        ge=0.0,
        description="Directions sampled with theta <= pi/2 + margin",
    )
    val_fraction: float = Field(
        default=0.05, ge=0.0, lt=1.0, description="Validation share"
    )
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")  # type: ignore[misc]
    def validate_lr_range(self) -> "StageConfig":
        """lr_min may not exceed lr_max."""
        if self.lr_min > self.lr_max:
            raise ValueError(
                f"lr_min ({self.lr_min}) exceeds lr_max ({self.lr_max})"
            )
        return self

    @classmethod
    def pretrain_defaults(cls, **overrides: Any) -> "StageConfig":
        """Stage-1 defaults: MSE, LWSRD 5e-4..1e-4, batch 16, 10 epochs."""
        values: Dict[str, Any] = dict(
            stage="pretrain",
            loss="mse",
            lr_schedule="lwsrd",
            lr_max=5e-4,
            lr_min=1e-4,
            batch_size=16,
            epochs=10,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def finetune_defaults(cls, **overrides: Any) -> "StageConfig":
        """Stage-2 defaults: Smooth-L1, step decay 5e-5..1e-5, batch 4."""
        values: Dict[str, Any] = dict(
            stage="finetune",
            loss="smooth_l1",
            lr_schedule="step_decay",
            lr_max=5e-5,
            lr_min=1e-5,
            batch_size=4,
            epochs=100,
        )
        values.update(overrides)
        return cls(**values)


class KrigingConfig(_Section):
    """Ordinary kriging baseline settings."""

    neighborhood_k: int = Field(
        default=64, ge=3, description="Nearest samples per query"
    )
    variogram_model: Literal["exponential", "spherical", "gaussian"] = (
        "exponential"
    )
    lag_width_m: float = Field(default=10.0, gt=0)
    max_lag_m: float = Field(default=300.0, gt=0)
    anisotropy: float = Field(
        default=1.0, gt=0, description="Vertical distance multiplier"
    )
    max_variogram_points: int = Field(
        default=3000,
        ge=2,
        description="Seeded subsample size for the empirical variogram",
    )


class AnalysisConfig(_Section):
    """Correlogram settings."""

    angular_res: float = Field(default=0.1, gt=0)
    radial_bin_m: float = Field(default=5.0, gt=0)
    normalization: Literal["group", "global"] = "group"


class SchemaMapping(_Section):
    """Maps CSV column names to measurement semantics."""

    x: Optional[str] = Field(default="x", description="East offset (m)")
    y: Optional[str] = Field(default="y", description="North offset (m)")
    z: Optional[str] = Field(default="z", description="Height above BS (m)")
    rsrp: str = Field(default="rsrp", description="RSRP column (dBm)")
    altitude_label: Optional[str] = Field(
        default=None, description="Optional altitude label column"
    )
    timestamp: Optional[str] = Field(default=None)
    lat: Optional[str] = Field(default=None, description="Latitude (deg)")
    lon: Optional[str] = Field(default=None, description="Longitude (deg)")
    alt: Optional[str] = Field(default=None, description="Altitude (m)")

    @property
    def geodetic(self) -> bool:
        """True when positions come as lat/lon/alt."""
        return self.lat is not None and self.lon is not None


class DatasetConfig(_Section):
    """Measurement ingestion and splitting."""

    schema_mapping: SchemaMapping = Field(default_factory=SchemaMapping)
    rsrp_floor_dbm: float = Field(
        default=-120.0, description="Drop rows below this RSRP"
    )
    max_malformed_frac: float = Field(
        default=0.01, ge=0.0, le=1.0, description="Abort threshold"
    )
    bs_origin: Optional[Tuple[float, float, float]] = Field(
        default=None,
        description="BS (lat deg, lon deg, alt m) for geodetic input",
    )
    split_ratios: Tuple[float, float, float] = Field(
        default=(0.75, 0.05, 0.2), description="train:val:test"
    )
    altitudes: Optional[Dict[str, float]] = Field(
        default=None,
        description="Label -> altitude (m) for nearest-slice labelling",
    )


class SynthConfig(_Section):
    """Synthetic measurement world sampling."""

    altitudes: Dict[str, float] = Field(
        default_factory=lambda: {
            "A": 50.0,
            "B": 70.0,
            "C": 90.0,
            "D": 110.0,
        },
        description="Altitude slices (label -> height above BS, m)",
    )
    n_per_slice: int = Field(default=500, ge=1)
    half_extent_m: float = Field(default=250.0, gt=0)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)


class GridConfig(_Section):
    """REM grid export box."""

    lower: Tuple[float, float, float] = Field(
        default=(-250.0, -250.0, 50.0), description="Lower corner (m)"
    )
    upper: Tuple[float, float, float] = Field(
        default=(250.0, 250.0, 110.0), description="Upper corner (m)"
    )
    cell: Tuple[float, float, float] = Field(
        default=(10.0, 10.0, 20.0), description="Cell sizes (m)"
    )
    fill_value: float = Field(
        default=-9999.0, description="Sentinel outside the r_max sphere"
    )
    fmt: Literal["binary", "csv"] = "binary"

    @model_validator(mode="after")  # type: ignore[misc]
    def validate_box(self) -> "GridConfig":
        """Box must be non-empty with positive cells."""
        for lo, hi, c in zip(self.lower, self.upper, self.cell):
            if c <= 0:
                raise ValueError("cell sizes must be positive")
            if hi < lo:
                raise ValueError("upper corner below lower corner")
        return self


class PathsConfig(_Section):
    """File locations used by the CLI."""

    out_dir: str = Field(default="runs", description="Output directory")
    measurements: Optional[str] = Field(default=None)
    checkpoint: Optional[str] = Field(default=None)
    queries: Optional[str] = Field(default=None)


class RunConfig(_Section):
    """Root configuration for every CLI command."""

    region: RegionConfig = Field(default_factory=RegionConfig)
    channel: ChannelConfig = Field(default_factory=ChannelConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    pretrain: StageConfig = Field(
        default_factory=StageConfig.pretrain_defaults
    )
    finetune: StageConfig = Field(
        default_factory=StageConfig.finetune_defaults
    )
    kriging: KrigingConfig = Field(default_factory=KrigingConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seed: int = Field(default=0, ge=0, description="Base seed")
    log_level: str = Field(default="INFO", description="Logging level")

    @field_validator(  # type: ignore[misc]
        "pretrain", "finetune", mode="before"
    )
    @classmethod
    def merge_stage_defaults(cls, v: Any, info: ValidationInfo) -> Any:
        """Partial stage sections inherit that stage's own defaults."""
        if not isinstance(v, dict):
            return v
        if info.field_name == "pretrain":
            base = StageConfig.pretrain_defaults()
        else:
            base = StageConfig.finetune_defaults()
        return {**base.model_dump(), **v}

    @field_validator("log_level")  # type: ignore[misc]
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate logging level."""
        if v.upper() not in VALID_LOG_LEVELS:
            raise ValueError(f"Log level must be one of: {VALID_LOG_LEVELS}")
        return v.upper()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """Build a config, turning pydantic errors into one ConfigError."""
        try:
            return cls(**data)
        except ValidationError as e:
            lines = [
                f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}"
                for err in e.errors()
            ]
            raise ConfigError(
                "Configuration validation failed:\n"
                + "\n".join(f"- {line}" for line in lines)
            ) from e

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        """Load a YAML config file."""
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config {path} must be a mapping")
        return cls.from_dict(data)

    @classmethod
    def from_env(cls, path: Optional[str] = None) -> "RunConfig":
        """Load from ``path`` or ``REM_CONFIG``, falling back to defaults.

        ``REM_LOG_LEVEL`` overrides the file's log level.
        """
        path = path or os.getenv("REM_CONFIG")
        config = cls.from_file(path) if path else cls()
        env_level = os.getenv("REM_LOG_LEVEL")
        if env_level:
            config = cls.from_dict(
                {**config.model_dump(), "log_level": env_level}
            )
        return config

    def dump_yaml(self, path: Union[str, Path]) -> None:
        """Write the resolved config as YAML."""
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(
                self.model_dump(mode="json"), fh, sort_keys=True
            )

    def validate_config(self) -> None:
        """Validate cross-section consistency and report every issue."""
        errors = []

        if self.model.max_seq != self.region.n_bins:
            errors.append(
                f"model.max_seq ({self.model.max_seq}) must equal "
                f"region.r_max/region.step ({self.region.n_bins})"
            )

        if self.pretrain.stage != "pretrain":
            errors.append("pretrain.stage must be 'pretrain'")
        if self.finetune.stage != "finetune":
            errors.append("finetune.stage must be 'finetune'")

        ratios = self.dataset.split_ratios
        if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            errors.append(
                f"dataset.split_ratios must be non-negative and sum to 1, "
                f"got: {ratios}"
            )
        if ratios[0] <= 0:
            errors.append("dataset.split_ratios train share must be > 0")

        mapping = self.dataset.schema_mapping
        if mapping.geodetic:
            if self.dataset.bs_origin is None:
                errors.append(
                    "dataset.bs_origin is required for lat/lon input"
                )
            if mapping.alt is None:
                errors.append(
                    "dataset.schema_mapping.alt is required for lat/lon "
                    "input"
                )
        elif not (mapping.x and mapping.y and mapping.z):
            errors.append(
                "dataset.schema_mapping needs x/y/z or lat/lon/alt columns"
            )

        for label, height in self.synth.altitudes.items():
            if height <= 0 or height > self.region.r_max:
                errors.append(
                    f"synth.altitudes[{label}] ({height}) must lie in "
                    f"(0, region.r_max]"
                )

        if self.log_level.upper() not in VALID_LOG_LEVELS:
            errors.append(
                f"Log level must be one of {VALID_LOG_LEVELS}, "
                f"got: {self.log_level}"
            )

        if errors:
            raise ConfigError(
                "Configuration validation failed:\n"
                + "\n".join(f"- {error}" for error in errors)
            )

    def get_summary(self) -> dict:
        """Get a summary of the configuration for logging/display."""
        return {
            "region": f"r_max={self.region.r_max} step={self.region.step}",
            "channel_tx_power_dbm": self.channel.tx_power_dbm,
            "channel_carrier_hz": self.channel.carrier_hz,
            "channel_antenna": self.channel.antenna.kind,
            "model": (
                f"d_model={self.model.d_model} layers={self.model.n_layers} "
                f"heads={self.model.n_heads}"
            ),
            "pretrain": (
                f"{self.pretrain.loss}/{self.pretrain.lr_schedule} "
                f"epochs={self.pretrain.epochs}"
            ),
            "finetune": (
                f"{self.finetune.loss}/{self.finetune.lr_schedule} "
                f"epochs={self.finetune.epochs}"
            ),
            "kriging_k": self.kriging.neighborhood_k,
            "rsrp_floor_dbm": self.dataset.rsrp_floor_dbm,
            "seed": self.seed,
            "log_level": self.log_level,
        }

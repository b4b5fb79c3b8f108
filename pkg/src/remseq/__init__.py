"""3D radio environment maps from radial RSRP sequences."""

__version__ = "0.1.0"

from .analysis import MetricsReport, altitude_split_eval, radial_correlogram
from .config import (
    ChannelConfig,
    KrigingConfig,
    ModelConfig,
    RunConfig,
    StageConfig,
)
from .dataset import MeasurementSet, ingest_csv
from .errors import (
    ConfigError,
    DataError,
    GeometryError,
    ModelFormatError,
    NumericalError,
    RemError,
)
from .geometry import RangeArray, to_cartesian, to_spherical
from .kriging import OrdinaryKriging, fit_semivariogram, krige_point
from .model import (
    EncoderModel,
    init_model,
    load_model,
    predict_point,
    save_model,
)
from .training import finetune, pretrain

__all__ = [
    "ChannelConfig",
    "ConfigError",
    "DataError",
    "EncoderModel",
    "GeometryError",
    "KrigingConfig",
    "MeasurementSet",
    "MetricsReport",
    "ModelConfig",
    "ModelFormatError",
    "NumericalError",
    "OrdinaryKriging",
    "RangeArray",
    "RemError",
    "RunConfig",
    "StageConfig",
    "altitude_split_eval",
    "finetune",
    "fit_semivariogram",
    "ingest_csv",
    "init_model",
    "krige_point",
    "load_model",
    "predict_point",
    "pretrain",
    "radial_correlogram",
    "save_model",
    "to_cartesian",
    "to_spherical",
]

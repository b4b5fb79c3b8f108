"""Radial correlogram and REM accuracy metrics."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import (
    Dict,
    Iterable,
    List,
    Literal,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import numpy.typing as npt
import pandas as pd

from .config import KrigingConfig, StageConfig
from .dataset import MeasurementSet
from .errors import ConfigError, DataError
from .geometry import (
    RangeArray,
    angular_bin_counts,
    angular_bins,
    to_spherical_array,
)
from .kriging import fit_semivariogram, krige_points
from .model import EncoderModel, predict_points
from .training import finetune

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]


@dataclass
class CorrelogramResult:
    """Mean pairwise RSRP correlation per radial-separation bin."""

    lags_m: FloatArray
    correlation: FloatArray
    counts: npt.NDArray[np.int64]
    angular_res: float
    radial_bin_m: float
    normalization: str = "group"
    groups_used: int = 0
    groups_skipped: Dict[str, int] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        """Columns: lag_m, correlation, pairs."""
        return pd.DataFrame(
            {
                "lag_m": self.lags_m,
                "correlation": self.correlation,
                "pairs": self.counts,
            }
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        """Write the plot-ready table."""
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def to_json(self, path: Union[str, Path]) -> None:
        """Write bins plus diagnostics."""
        payload = {
            "angular_res": self.angular_res,
            "radial_bin_m": self.radial_bin_m,
            "normalization": self.normalization,
            "groups_used": self.groups_used,
            "groups_skipped": self.groups_skipped,
            "bins": self.to_frame().to_dict(orient="records"),
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def radial_correlogram(
    data: MeasurementSet,
    angular_res: float = 0.1,
    radial_bin: float = 5.0,
    normalization: Literal["group", "global"] = "group",
) -> CorrelogramResult:
    """Correlation of RSRP versus radial separation within angular bins.

    Points are grouped by (phi, theta) bin. Each within-group pair adds the
    centred product ``(z_i - mu)(z_j - mu) / var`` to the bin of
    ``|rho_i - rho_j|``; contributions are pooled over all groups. ``mu``
    and ``var`` come from the group or, with ``normalization="global"``,
    from the whole set. Groups with fewer than 2 points or zero variance
    are skipped and counted.
    """
    if len(data) < 2:
        raise DataError("correlogram needs at least 2 points")
    if radial_bin <= 0:
        raise ValueError(f"radial_bin must be > 0, got {radial_bin}")
    if normalization not in ("group", "global"):
        raise ConfigError(f"unknown normalization {normalization!r}")
    sph = to_spherical_array(data.xyz)
    phi_bin, theta_bin = angular_bins(sph[:, 1], sph[:, 2], angular_res)
    _, n_theta = angular_bin_counts(angular_res)
    keys = phi_bin * n_theta + theta_bin
    z = data.rsrp_dbm
    global_mu, global_var = float(z.mean()), float(z.var())

    sums: Dict[int, float] = {}
    counts: Dict[int, int] = {}
    skipped = {"too_few_points": 0, "zero_variance": 0}
    used = 0
    for key in np.unique(keys):
        members = np.flatnonzero(keys == key)
        if members.size < 2:
            skipped["too_few_points"] += 1
            continue
        zg = z[members]
        if normalization == "group":
            mu, var = float(zg.mean()), float(zg.var())
        else:
            mu, var = global_mu, global_var
        if not var > 0.0:
            skipped["zero_variance"] += 1
            continue
        used += 1
        i, j = np.triu_indices(members.size, k=1)
        centred = zg - mu
        contrib = centred[i] * centred[j] / var
        lag_bin = np.floor(
            np.abs(sph[members[i], 0] - sph[members[j], 0]) / radial_bin
        ).astype(np.int64)
        s = np.bincount(lag_bin, weights=contrib)
        c = np.bincount(lag_bin)
        for b in np.flatnonzero(c):
            sums[int(b)] = sums.get(int(b), 0.0) + float(s[b])
            counts[int(b)] = counts.get(int(b), 0) + int(c[b])

    if sum(skipped.values()):
        logger.warning(
            f"Correlogram skipped {skipped['too_few_points']} group(s) with "
            f"< 2 points and {skipped['zero_variance']} with zero variance"
        )
    bins = np.array(sorted(counts), dtype=np.int64)
    pair_counts = np.array([counts[b] for b in bins], dtype=np.int64)
    corr = np.array([sums[b] / counts[b] for b in bins], dtype=np.float64)
    return CorrelogramResult(
        lags_m=(bins + 0.5) * radial_bin,
        correlation=np.clip(corr, -1.0, 1.0),
        counts=pair_counts,
        angular_res=angular_res,
        radial_bin_m=radial_bin,
        normalization=normalization,
        groups_used=used,
        groups_skipped=skipped,
    )


def _paired(pred: FloatArray, truth: FloatArray) -> FloatArray:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise DataError(
            f"length mismatch: {pred.shape[0]} predictions, "
            f"{truth.shape[0]} truths"
        )
    if pred.size == 0:
        raise DataError("metrics need at least one pair")
    return pred - truth


def rmse(pred: FloatArray, truth: FloatArray) -> float:
    """Root mean squared error (dB)."""
    err = _paired(pred, truth)
    return math.sqrt(float(np.mean(err**2)))


def mae(pred: FloatArray, truth: FloatArray) -> float:
    """Mean absolute error (dB)."""
    return float(np.mean(np.abs(_paired(pred, truth))))


def median_ae(pred: FloatArray, truth: FloatArray) -> float:
    """Median absolute error (dB)."""
    return float(np.median(np.abs(_paired(pred, truth))))


def r_squared(pred: FloatArray, truth: FloatArray) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``."""
    err = _paired(pred, truth)
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if truth.size < 2:
        raise DataError("undefined R²: need at least 2 points")
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        raise DataError("undefined R²: truth is constant")
    return 1.0 - float(np.sum(err**2)) / ss_tot


@dataclass(frozen=True)
class MetricsReport:
    """Accuracy of one prediction set."""

    rmse_db: float
    mae_db: float
    median_ae_db: float
    r_squared: float
    n_points: int
    label: str = ""

    def __post_init__(self) -> None:
        slack = 1e-12 * max(1.0, self.mae_db)
        if self.mae_db < 0 or self.rmse_db < self.mae_db - slack:
            raise ValueError(
                f"inconsistent metrics: rmse={self.rmse_db} mae={self.mae_db}"
            )

    @classmethod
    def from_predictions(
        cls, pred: FloatArray, truth: FloatArray, label: str = ""
    ) -> "MetricsReport":
        """Compute every metric; R² is NaN where it is undefined."""
        try:
            r2 = r_squared(pred, truth)
        except DataError as e:
            if "undefined" not in str(e):
                raise
            logger.warning(f"{label or 'metrics'}: {e}")
            r2 = math.nan
        return cls(
            rmse_db=rmse(pred, truth),
            mae_db=mae(pred, truth),
            median_ae_db=median_ae(pred, truth),
            r_squared=r2,
            n_points=int(np.asarray(truth).size),
            label=label,
        )

    def to_dict(self) -> Dict[str, Union[str, float, int]]:
        """Plain dict, column order as written to CSV."""
        return asdict(self)

    def to_json(self, path: Union[str, Path]) -> None:
        """Write one report as JSON."""
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def to_csv(self, path: Union[str, Path]) -> None:
        """Write one report as a single-row CSV."""
        reports_to_frame([self]).to_csv(
            path, index=False, float_format="%.17g"
        )


def reports_to_frame(reports: Iterable[MetricsReport]) -> pd.DataFrame:
    """One row per report: label, rmse_db, mae_db, median_ae_db, ..."""
    columns = [
        "label",
        "rmse_db",
        "mae_db",
        "median_ae_db",
        "r_squared",
        "n_points",
    ]
    return pd.DataFrame([r.to_dict() for r in reports], columns=columns)


def compare_stages(
    stage1_pred: FloatArray, stage2_pred: FloatArray, truth: FloatArray
) -> List[MetricsReport]:
    """Side-by-side metrics of the pretrained and fine-tuned models."""
    return [
        MetricsReport.from_predictions(stage1_pred, truth, label="stage1"),
        MetricsReport.from_predictions(stage2_pred, truth, label="stage2"),
    ]


HoldoutKind = Literal["random", "sector"]


def _holdout_order(
    xyz: FloatArray, kind: HoldoutKind, seed: int
) -> npt.NDArray[np.int64]:
    """Point order whose leading entries form the held-out share.

    ``random`` permutes the points; ``sector`` sorts them by azimuth
    measured from a seeded start angle, so any leading share is one
    contiguous wedge around the BS.
    """
    rng = np.random.default_rng(seed)
    if kind == "random":
        return np.asarray(rng.permutation(len(xyz)), dtype=np.int64)
    if kind == "sector":
        start = rng.uniform(-math.pi, math.pi)
        phi = np.arctan2(xyz[:, 1], xyz[:, 0])
        offset = np.mod(phi - start, 2.0 * math.pi)
        return np.asarray(np.argsort(offset, kind="stable"), dtype=np.int64)
    raise ConfigError(f"unknown holdout kind {kind!r}")


def split_altitudes(
    data: MeasurementSet,
    train_altitudes: Sequence[str],
    test_altitude: str,
    holdout_fraction: float = 0.2,
    seed: int = 0,
    holdout: HoldoutKind = "random",
) -> Tuple[MeasurementSet, MeasurementSet]:
    """Training union and disjoint test points for one altitude split."""
    train_altitudes = list(train_altitudes)
    if not train_altitudes:
        raise DataError("no training altitudes selected")
    test_slice = data.by_altitude([test_altitude])
    train = data.by_altitude(train_altitudes)
    if test_altitude not in train_altitudes:
        return train, test_slice
    # same slice on both sides: hold out a disjoint share of it
    order = _holdout_order(test_slice.xyz, holdout, seed)
    n_test = max(1, int(round(holdout_fraction * len(test_slice))))
    others = [a for a in train_altitudes if a != test_altitude]
    parts = [test_slice.subset(order[n_test:])]
    if others:
        parts.insert(0, data.by_altitude(others))
    return MeasurementSet.concat(parts), test_slice.subset(order[:n_test])


def altitude_split_eval(
    data: MeasurementSet,
    train_altitudes: Sequence[str],
    test_altitude: str,
    method: Literal["transformer", "kriging"],
    model: Optional[EncoderModel] = None,
    delta: Optional[RangeArray] = None,
    finetune_cfg: Optional[StageConfig] = None,
    kriging_cfg: Optional[KrigingConfig] = None,
    holdout_fraction: float = 0.2,
    seed: int = 0,
    holdout: HoldoutKind = "random",
) -> MetricsReport:
    """Fit on the union of ``train_altitudes`` and score on the test slice.

    When the test altitude is also a training altitude, a seeded
    ``holdout_fraction`` of that slice is held out so train and test stay
    disjoint: scattered points (``random``) or one azimuth wedge
    (``sector``). The transformer path fine-tunes a copy of ``model``.
    """
    train, test = split_altitudes(
        data, train_altitudes, test_altitude, holdout_fraction, seed, holdout
    )
    if len(train) == 0:
        raise DataError("training selection is empty")
    label = f"{method}:{''.join(train_altitudes)}->{test_altitude}"
    logger.info(
        f"Altitude split {label}: {len(train)} train, {len(test)} test"
    )
    if method == "transformer":
        if model is None or delta is None:
            raise ConfigError("transformer evaluation needs a model and delta")
        cfg = finetune_cfg or StageConfig.finetune_defaults(seed=seed)
        tuned, _ = finetune(model.copy(), train, cfg, delta)
        pred = predict_points(tuned, test.xyz, delta)
    elif method == "kriging":
        cfg_k = kriging_cfg or KrigingConfig()
        vg = fit_semivariogram(train, cfg_k, seed=seed)
        pred, _ = krige_points(test.xyz, train, vg, cfg_k)
    else:
        raise ConfigError(f"unknown method {method!r}")
    return MetricsReport.from_predictions(pred, test.rsrp_dbm, label=label)

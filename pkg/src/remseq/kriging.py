"""Neighbourhood ordinary kriging with a fitted semivariogram.

Variogram models take ``(nugget, psill, range_m)`` with ``sill = nugget +
psill`` and use ``range_m`` as the correlation length:

    exponential  nugget + psill * (1 - exp(-h / range))
    gaussian     nugget + psill * (1 - exp(-(h / range)^2))
    spherical    nugget + psill * (1.5 h/range - 0.5 (h/range)^3), h < range

All models are 0 at ``h == 0``.
"""

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import numpy.typing as npt
import scipy.linalg
from scipy.optimize import least_squares
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, pdist

from .config import KrigingConfig
from .dataset import MeasurementSet
from .errors import DataError, NumericalError
from .geometry import CartesianPoint

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
ModelFn = Callable[[FloatArray, float, float, float], FloatArray]

_JITTERS = (0.0, 1e-10, 1e-8, 1e-6)


def _exponential(
    h: FloatArray, nugget: float, psill: float, rng: float
) -> FloatArray:
    return nugget + psill * (1.0 - np.exp(-h / rng))


def _gaussian(
    h: FloatArray, nugget: float, psill: float, rng: float
) -> FloatArray:
    return nugget + psill * (1.0 - np.exp(-((h / rng) ** 2)))


def _spherical(
    h: FloatArray, nugget: float, psill: float, rng: float
) -> FloatArray:
    r = np.minimum(h / rng, 1.0)
    return nugget + psill * (1.5 * r - 0.5 * r**3)


VARIOGRAM_MODELS: Dict[str, ModelFn] = {
    "exponential": _exponential,
    "gaussian": _gaussian,
    "spherical": _spherical,
}


@dataclass(frozen=True)
class EmpiricalVariogram:
    """Binned semivariances with their pair counts."""

    lags: FloatArray
    gamma: FloatArray
    counts: npt.NDArray[np.int64]

    def __len__(self) -> int:
        return int(self.lags.shape[0])


@dataclass(frozen=True)
class Semivariogram:
    """Fitted variogram model."""

    model: str
    nugget: float
    sill: float
    range_m: float
    empirical: Optional[EmpiricalVariogram] = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        if self.model not in VARIOGRAM_MODELS:
            raise ValueError(f"unknown variogram model {self.model!r}")
        if self.nugget < 0:
            raise ValueError(f"nugget must be >= 0, got {self.nugget}")
        if self.sill < self.nugget:
            raise ValueError(
                f"sill ({self.sill}) must be >= nugget ({self.nugget})"
            )
        if not self.range_m > 0:
            raise ValueError(f"range_m must be > 0, got {self.range_m}")

    def __call__(self, h: FloatArray) -> FloatArray:
        h = np.asarray(h, dtype=np.float64)
        fn = VARIOGRAM_MODELS[self.model]
        value = fn(h, self.nugget, self.sill - self.nugget, self.range_m)
        return np.where(h > 0.0, value, 0.0)


def _scaled(xyz: FloatArray, anisotropy: float) -> FloatArray:
    out = np.array(xyz, dtype=np.float64).reshape(-1, 3)
    out[:, 2] *= anisotropy
    return out


def empirical_semivariogram(
    data: MeasurementSet,
    lag_width_m: float,
    max_lag_m: float,
    anisotropy: float = 1.0,
    max_points: Optional[int] = None,
    seed: int = 0,
) -> EmpiricalVariogram:
    """Classical estimator over lag bins centred at multiples of the width.

    A pair at distance ``d`` falls in the bin centred at ``h`` when
    ``|d - h| < lag_width_m / 2``. Empty bins are omitted. With
    ``max_points`` a seeded subsample bounds the pair count.
    """
    if len(data) < 2:
        raise DataError("semivariogram needs at least 2 points")
    if lag_width_m <= 0 or max_lag_m <= 0:
        raise ValueError("lag width and max lag must be positive")
    xyz, z = data.xyz, data.rsrp_dbm
    if max_points is not None and len(data) > max_points:
        pick = np.random.default_rng(seed).choice(
            len(data), size=max_points, replace=False
        )
        xyz, z = xyz[pick], z[pick]
    dist = pdist(_scaled(xyz, anisotropy))
    half_sq = 0.5 * pdist(z[:, None], "sqeuclidean")
    bins = np.floor(dist / lag_width_m + 0.5).astype(np.int64)
    n_bins = int(np.floor(max_lag_m / lag_width_m + 1e-9)) + 1
    keep = bins < n_bins
    counts = np.bincount(bins[keep], minlength=n_bins)
    sums = np.bincount(bins[keep], weights=half_sq[keep], minlength=n_bins)
    nonempty = counts > 0
    lags = lag_width_m * np.arange(n_bins, dtype=np.float64)
    return EmpiricalVariogram(
        lags=lags[nonempty],
        gamma=sums[nonempty] / counts[nonempty],
        counts=counts[nonempty].astype(np.int64),
    )


def fit_variogram(
    empirical: EmpiricalVariogram, model: str = "exponential"
) -> Semivariogram:
    """Pair-count-weighted least squares over (nugget, psill, range)."""
    if model not in VARIOGRAM_MODELS:
        raise ValueError(f"unknown variogram model {model!r}")
    if len(empirical) < 3:
        raise DataError(
            f"variogram fit needs >= 3 non-empty lags, got {len(empirical)}"
        )
    lags, gamma = empirical.lags, empirical.gamma
    max_lag = float(np.max(lags))
    g_max = float(np.max(gamma))
    if g_max <= 0.0:
        return Semivariogram(model, 0.0, 0.0, max_lag or 1.0, empirical)

    fn = VARIOGRAM_MODELS[model]
    weights = np.sqrt(empirical.counts.astype(np.float64))

    def residuals(x: FloatArray) -> FloatArray:
        return weights * (fn(lags, x[0], x[1], x[2]) - gamma)

    x0 = np.array(
        [max(float(np.min(gamma)), 0.0) * 0.5, g_max, 0.25 * max_lag]
    )
    lower = np.array([0.0, 0.0, 1e-6 * max_lag])
    upper = np.array([g_max, 10.0 * g_max, 10.0 * max_lag])
    x0 = np.clip(x0, lower, upper)
    result = least_squares(
        residuals,
        x0,
        bounds=(lower, upper),
        x_scale=np.array([g_max, g_max, max_lag]),
        xtol=1e-12,
        ftol=1e-12,
        gtol=1e-12,
        max_nfev=10000,
    )
    if result.status < 0 or not np.all(np.isfinite(result.x)):
        raise NumericalError(
            f"variogram fit failed (status {result.status}): "
            f"{result.message}; cost={result.cost:g}"
        )
    if result.status == 0:
        logger.warning(
            f"Variogram fit hit the evaluation limit; cost={result.cost:g}"
        )
    nugget, psill, range_m = (float(v) for v in result.x)
    logger.debug(
        f"Fitted {model} variogram: nugget={nugget:.4g} "
        f"sill={nugget + psill:.4g} range={range_m:.4g} m"
    )
    return Semivariogram(model, nugget, nugget + psill, range_m, empirical)


def fit_semivariogram(
    data: MeasurementSet, cfg: KrigingConfig, seed: int = 0
) -> Semivariogram:
    """Empirical estimate plus model fit using ``cfg``."""
    empirical = empirical_semivariogram(
        data,
        cfg.lag_width_m,
        cfg.max_lag_m,
        anisotropy=cfg.anisotropy,
        max_points=cfg.max_variogram_points,
        seed=seed,
    )
    return fit_variogram(empirical, cfg.variogram_model)


def kriging_weights(
    neighbors: FloatArray, q: FloatArray, vg: Semivariogram
) -> Tuple[FloatArray, float]:
    """Solve the ordinary kriging system for one query.

    Returns the weights (summing to 1) and the Lagrange multiplier. When
    the system is singular a small nugget is added to the covariance
    diagonal, growing until the solve succeeds.
    """
    neighbors = np.asarray(neighbors, dtype=np.float64).reshape(-1, 3)
    n = neighbors.shape[0]
    if n == 0:
        raise DataError("kriging needs at least one sample")
    gamma = vg(cdist(neighbors, neighbors))
    rhs = np.append(vg(cdist(neighbors, q.reshape(1, 3))[:, 0]), 1.0)
    scale = max(vg.sill, 1.0)
    for jitter in _JITTERS:
        lhs = np.ones((n + 1, n + 1))
        lhs[:n, :n] = gamma - jitter * scale * np.eye(n)
        lhs[n, n] = 0.0
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
                sol = scipy.linalg.solve(lhs, rhs)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
            logger.debug(f"Kriging system singular at jitter {jitter:g}")
            continue
        if np.all(np.isfinite(sol)):
            return sol[:n], float(sol[n])
    raise NumericalError(
        f"kriging system singular after jitter up to {_JITTERS[-1]:g}"
    )


@dataclass(frozen=True)
class KrigingEstimate:
    """One kriged value with its variance and the weights used."""

    value: float
    variance: float
    weights: FloatArray
    neighbors: npt.NDArray[np.int64]

    @property
    def has_negative_weights(self) -> bool:
        """Negative weights are legal but worth flagging."""
        return bool(np.any(self.weights < 0))


class OrdinaryKriging:
    """Neighbourhood-limited ordinary kriging over a measurement set."""

    def __init__(
        self, data: MeasurementSet, vg: Semivariogram, cfg: KrigingConfig
    ) -> None:
        """Index ``data`` for nearest-neighbour queries."""
        if len(data) == 0:
            raise DataError("kriging needs a non-empty measurement set")
        self.data = data
        self.vg = vg
        self.cfg = cfg
        self.logger = logging.getLogger(__name__)
        self._coords = _scaled(data.xyz, cfg.anisotropy)
        self._tree = cKDTree(self._coords)
        self._k = min(cfg.neighborhood_k, len(data))

    def estimate(self, q: FloatArray) -> KrigingEstimate:
        """Krige at one ``(3,)`` Cartesian point."""
        q_scaled = _scaled(np.asarray(q), self.cfg.anisotropy)[0]
        _, idx = self._tree.query(q_scaled, k=self._k)
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        weights, mu = kriging_weights(self._coords[idx], q_scaled, self.vg)
        values = self.data.rsrp_dbm[idx]
        offsets = self._coords[idx] - q_scaled
        gamma0 = self.vg(np.linalg.norm(offsets, axis=1))
        variance = max(0.0, float(weights @ gamma0) + mu)
        return KrigingEstimate(
            value=float(weights @ values),
            variance=variance,
            weights=weights,
            neighbors=idx,
        )

    def predict(
        self, points: FloatArray, workers: int = 1
    ) -> Tuple[FloatArray, FloatArray]:
        """Estimates and variances at ``(n, 3)`` points, in input order."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(self.estimate, points))
        else:
            results = [self.estimate(p) for p in points]
        flagged = sum(r.has_negative_weights for r in results)
        if flagged:
            self.logger.debug(
                f"{flagged} of {len(results)} queries used negative weights"
            )
        return (
            np.array([r.value for r in results], dtype=np.float64),
            np.array([r.variance for r in results], dtype=np.float64),
        )


def krige_point(
    q: CartesianPoint,
    data: MeasurementSet,
    vg: Semivariogram,
    cfg: KrigingConfig,
) -> Tuple[float, float]:
    """Kriged RSRP (dBm) and kriging variance at ``q``."""
    est = OrdinaryKriging(data, vg, cfg).estimate(q.as_array())
    return est.value, est.variance


def krige_points(
    points: FloatArray,
    data: MeasurementSet,
    vg: Semivariogram,
    cfg: KrigingConfig,
    workers: int = 1,
) -> Tuple[FloatArray, FloatArray]:
    """Vectorised ``krige_point`` over ``(n, 3)`` queries."""
    return OrdinaryKriging(data, vg, cfg).predict(points, workers=workers)

"""Deterministic channel model: FSPL, antenna gain and correlated shadowing.

The received power at a point is

    P = P_b + FSPL(rho) + A(phi, theta) [+ SF(x, y, z)] [+ N]

with FSPL expressed as a (negative) gain in dB and f_c in Hz.
"""

import logging
import math
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
import scipy.linalg
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial.distance import cdist

from .config import (
    AntennaPattern,
    ChannelConfig,
    NoiseConfig,
    ShadowingConfig,
)
from .dataset import MeasurementSet
from .errors import GeometryError, NumericalError
from .geometry import RangeArray, direction_unit_vector, to_spherical_array

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

FSPL_CONSTANT_DB = 147.55
MAX_SHADOW_POINTS = 5000
_JITTERS = (0.0, 1e-12, 1e-10, 1e-8)


def fspl_gain_db(rho: float, carrier_hz: float) -> float:
    """Free-space path gain in dB (negative beyond a few wavelengths)."""
    return float(fspl_gain_db_array(np.array([rho]), carrier_hz)[0])


def fspl_gain_db_array(rho: FloatArray, carrier_hz: float) -> FloatArray:
    """Vectorised ``fspl_gain_db``."""
    rho = np.asarray(rho, dtype=np.float64)
    if carrier_hz <= 0:
        raise GeometryError(f"carrier_hz must be > 0, got {carrier_hz}")
    if np.any(~(rho > 0)):
        raise GeometryError("FSPL undefined for rho <= 0")
    gain = (
        FSPL_CONSTANT_DB
        - 20.0 * np.log10(rho)
        - 20.0 * math.log10(carrier_hz)
    )
    return np.asarray(gain, dtype=np.float64)


def _wrap_angle(a: FloatArray) -> FloatArray:
    return np.asarray(np.angle(np.exp(1j * a)), dtype=np.float64)


def _table_interpolator(pattern: AntennaPattern) -> RegularGridInterpolator:
    phi = np.asarray(pattern.table_phi, dtype=np.float64)
    theta = np.asarray(pattern.table_theta, dtype=np.float64)
    gain = np.asarray(pattern.table_gain_db, dtype=np.float64)
    # pad one node on each side so interpolation wraps across +-pi
    phi_ext = np.concatenate(
        [[phi[-1] - 2 * math.pi], phi, [phi[0] + 2 * math.pi]]
    )
    gain_ext = np.vstack([gain[-1:], gain, gain[:1]])
    return RegularGridInterpolator(
        (phi_ext, theta),
        gain_ext,
        method="linear",
        bounds_error=False,
        fill_value=None,
    )


def antenna_gain_array(
    pattern: AntennaPattern, phi: FloatArray, theta: FloatArray
) -> FloatArray:
    """Vectorised ``antenna_gain``."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if pattern.kind == "isotropic":
        return np.zeros(np.broadcast(phi, theta).shape)
    if pattern.kind == "parametric":
        d_phi = _wrap_angle(phi - pattern.boresight_phi)
        d_theta = theta - pattern.boresight_theta
        attenuation = 12.0 * (
            (d_phi / pattern.beamwidth_az) ** 2
            + (d_theta / pattern.beamwidth_el) ** 2
        )
        return np.asarray(
            pattern.peak_gain_dbi
            - np.minimum(attenuation, pattern.front_to_back_db),
            dtype=np.float64,
        )
    interp = _table_interpolator(pattern)
    phi_b, theta_b = np.broadcast_arrays(phi, theta)
    pts = np.stack([_wrap_angle(phi_b).ravel(), theta_b.ravel()], axis=1)
    return np.asarray(interp(pts).reshape(phi_b.shape), dtype=np.float64)


def antenna_gain(pattern: AntennaPattern, phi: float, theta: float) -> float:
    """Antenna gain A_dB(phi, theta) in dB."""
    return float(
        antenna_gain_array(pattern, np.array([phi]), np.array([theta]))[0]
    )


def _cholesky_with_jitter(cov: FloatArray) -> FloatArray:
    scale = float(np.max(np.diag(cov))) if cov.size else 0.0
    for jitter in _JITTERS:
        try:
            return np.asarray(
                scipy.linalg.cholesky(
                    cov + jitter * scale * np.eye(cov.shape[0]), lower=True
                ),
                dtype=np.float64,
            )
        except np.linalg.LinAlgError:
            logger.debug(f"Cholesky failed with jitter {jitter}, retrying")
    raise NumericalError(
        "Shadowing covariance is not positive definite after jitter "
        f"up to {_JITTERS[-1]:g}"
    )


def sample_shadow_field(
    points: FloatArray, cfg: ShadowingConfig
) -> FloatArray:
    """Draw a zero-mean Gaussian field with exponential covariance.

    ``points`` is an ``(n, 3)`` array in metres. Coincident points receive
    identical values. The draw depends only on ``cfg.seed``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise GeometryError("shadow field points must be finite")
    n = points.shape[0]
    if n == 0 or cfg.sigma_db == 0.0:
        return np.zeros(n)
    unique, inverse = np.unique(points, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if unique.shape[0] > MAX_SHADOW_POINTS:
        logger.warning(
            f"Sampling shadowing jointly over {unique.shape[0]} points; "
            f"dense Cholesky above {MAX_SHADOW_POINTS} is slow"
        )
    dist = cdist(unique, unique)
    cov = cfg.sigma_db**2 * np.exp(-dist / cfg.corr_length_m)
    chol = _cholesky_with_jitter(cov)
    rng = np.random.default_rng(cfg.seed)
    field = chol @ rng.standard_normal(unique.shape[0])
    return np.asarray(field[inverse], dtype=np.float64)


def rsrp_sequence(
    direction: Tuple[float, float],
    delta: RangeArray,
    cfg: ChannelConfig,
    include_shadowing: bool = True,
) -> FloatArray:
    """RSRP (dBm) at every radial bin along ``direction = (phi, theta)``."""
    phi, theta = direction
    seq = (
        cfg.tx_power_dbm
        + fspl_gain_db_array(delta.values, cfg.carrier_hz)
        + antenna_gain(cfg.antenna, phi, theta)
    )
    if include_shadowing and cfg.shadowing is not None:
        ray = delta.values[:, None] * direction_unit_vector(phi, theta)
        seq = seq + sample_shadow_field(ray, cfg.shadowing)
    return np.asarray(seq, dtype=np.float64)


def world_rsrp(
    xyz: FloatArray, cfg: ChannelConfig, include_shadowing: bool = True
) -> FloatArray:
    """Noise-free RSRP (dBm) at arbitrary Cartesian points.

    Shadowing, when enabled, is one joint draw over all ``xyz``.
    """
    sph = to_spherical_array(xyz)
    rsrp = (
        cfg.tx_power_dbm
        + fspl_gain_db_array(sph[:, 0], cfg.carrier_hz)
        + antenna_gain_array(cfg.antenna, sph[:, 1], sph[:, 2])
    )
    if include_shadowing and cfg.shadowing is not None:
        rsrp = rsrp + sample_shadow_field(xyz, cfg.shadowing)
    return np.asarray(rsrp, dtype=np.float64)


def synthesize_measurements(
    xyz: FloatArray,
    cfg: ChannelConfig,
    noise: Optional[NoiseConfig] = None,
    altitude_labels: Optional[Sequence[str]] = None,
) -> MeasurementSet:
    """Evaluate the full channel, noise included, as a measurement set."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rsrp = world_rsrp(xyz, cfg, include_shadowing=True)
    if noise is not None and noise.sigma_db > 0:
        rng = np.random.default_rng(noise.seed)
        rsrp = rsrp + noise.sigma_db * rng.standard_normal(rsrp.shape[0])
    labels = (
        np.asarray(list(altitude_labels), dtype=object)
        if altitude_labels is not None
        else None
    )
    logger.info(f"Synthesized {xyz.shape[0]} measurements")
    return MeasurementSet(
        xyz=xyz,
        rsrp_dbm=rsrp,
        altitude_label=labels,
        provenance={
            "source": "synthetic",
            "channel": cfg.model_dump(mode="json"),
            "noise": noise.model_dump(mode="json") if noise else None,
        },
    )


def sample_altitude_slices(
    altitudes: Dict[str, float],
    n_per_slice: int,
    half_extent_m: float,
    seed: int,
) -> Tuple[FloatArray, list]:
    """Uniform horizontal samples on square planes at each altitude.

    Returns the ``(n, 3)`` points and the matching altitude labels, slices
    in the iteration order of ``altitudes``.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    labels: list = []
    for label, height in altitudes.items():
        xy = rng.uniform(
            -half_extent_m, half_extent_m, size=(n_per_slice, 2)
        )
        chunks.append(np.column_stack([xy, np.full(n_per_slice, height)]))
        labels.extend([label] * n_per_slice)
    return np.vstack(chunks), labels


def sample_ray_points(
    directions: Iterable[Tuple[float, float]], radii: FloatArray
) -> FloatArray:
    """Cartesian points at ``radii`` along each direction, stacked."""
    rays = [
        np.asarray(radii, dtype=np.float64)[:, None]
        * direction_unit_vector(phi, theta)
        for phi, theta in directions
    ]
    return np.vstack(rays)

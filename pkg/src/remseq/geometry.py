"""Spherical frame rooted at the BS antenna, radial and angular binning.

Conventions: ``phi`` is the azimuth in (-pi, pi] from the two-argument
arctangent, ``theta`` the inclination from +z in [0, pi]. At the zenith and
nadir the azimuth is defined as 0.
"""

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import numpy.typing as npt

from .errors import GeometryError

FloatArray = npt.NDArray[np.float64]


@dataclass(frozen=True)
class CartesianPoint:
    """Position in metres relative to the BS phase centre."""

    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise GeometryError(f"Non-finite coordinates: {self}")

    def as_array(self) -> FloatArray:
        """Return ``[x, y, z]``."""
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class SphericalPoint:
    """Position as (rho, phi, theta)."""

    rho: float
    phi: float
    theta: float

    def __post_init__(self) -> None:
        if not self.rho >= 0:
            raise GeometryError(f"rho must be >= 0, got {self.rho}")
        if not -math.pi < self.phi <= math.pi:
            raise GeometryError(f"phi must lie in (-pi, pi], got {self.phi}")
        if not 0.0 <= self.theta <= math.pi:
            raise GeometryError(
                f"theta must lie in [0, pi], got {self.theta}"
            )

    @property
    def direction(self) -> Tuple[float, float]:
        """The ``(phi, theta)`` pair."""
        return (self.phi, self.theta)


@dataclass(frozen=True)
class RangeArray:
    """Ascending radii ``[step, 2*step, ..., r_max]``."""

    r_max: float
    step: float
    values: FloatArray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.step <= 0 or self.r_max <= 0:
            raise GeometryError("r_max and step must be positive")
        ratio = self.r_max / self.step
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > 1e-9:
            raise GeometryError(
                f"r_max ({self.r_max}) is not a whole multiple of "
                f"step ({self.step})"
            )
        values = self.step * np.arange(1, n + 1, dtype=np.float64)
        values[-1] = self.r_max
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class AngularBinIndex:
    """Integer (phi, theta) bin at a given angular resolution."""

    phi_bin: int
    theta_bin: int


def _wrap_phi(phi: FloatArray) -> FloatArray:
    # arctan2 can return -pi for a signed-zero y; fold onto +pi
    return np.where(phi <= -math.pi, math.pi, phi)


def to_spherical(p: CartesianPoint) -> SphericalPoint:
    """Convert a Cartesian point to the spherical frame."""
    rho, phi, theta = to_spherical_array(p.as_array()[None, :])[0]
    return SphericalPoint(float(rho), float(phi), float(theta))


def to_spherical_array(xyz: FloatArray) -> FloatArray:
    """Vectorised ``to_spherical`` over an ``(n, 3)`` array.

    Returns an ``(n, 3)`` array of ``(rho, phi, theta)`` rows.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rho = np.sqrt(x * x + y * y + z * z)
    if np.any(rho == 0.0):
        raise GeometryError("undefined direction: point at the origin")
    on_axis = (x == 0.0) & (y == 0.0)
    phi = np.where(on_axis, 0.0, _wrap_phi(np.arctan2(y, x)))
    theta = np.arccos(np.clip(z / rho, -1.0, 1.0))
    return np.stack([rho, phi, theta], axis=1)


def to_cartesian(s: SphericalPoint) -> CartesianPoint:
    """Convert a spherical point back to Cartesian."""
    x, y, z = to_cartesian_array(
        np.array([[s.rho, s.phi, s.theta]], dtype=np.float64)
    )[0]
    return CartesianPoint(float(x), float(y), float(z))


def to_cartesian_array(rpt: FloatArray) -> FloatArray:
    """Vectorised ``to_cartesian`` over ``(n, 3)`` rows of rho/phi/theta."""
    rpt = np.asarray(rpt, dtype=np.float64)
    rho, phi, theta = rpt[:, 0], rpt[:, 1], rpt[:, 2]
    sin_t = np.sin(theta)
    return np.stack(
        [
            rho * sin_t * np.cos(phi),
            rho * sin_t * np.sin(phi),
            rho * np.cos(theta),
        ],
        axis=1,
    )


def direction_unit_vector(phi: float, theta: float) -> FloatArray:
    """Unit vector pointing along ``(phi, theta)``."""
    return np.array(
        [
            math.sin(theta) * math.cos(phi),
            math.sin(theta) * math.sin(phi),
            math.cos(theta),
        ],
        dtype=np.float64,
    )


def radial_bins(rho: FloatArray, delta: RangeArray) -> npt.NDArray[np.int64]:
    """Nearest range-array index for every radius, ties to the lower bin."""
    rho = np.asarray(rho, dtype=np.float64)
    upper = delta.r_max + delta.step / 2.0
    bad = ~((rho > 0.0) & (rho <= upper))
    if np.any(bad):
        first = float(rho[bad].flat[0])
        raise GeometryError(
            f"radius {first} m outside region of interest "
            f"(0, {upper}] m"
        )
    k = np.ceil(rho / delta.step - 1.0 - 0.5)
    return np.clip(k, 0, len(delta) - 1).astype(np.int64)


def radial_bin(rho: float, delta: RangeArray) -> int:
    """Index ``k`` of the range-array entry closest to ``rho``."""
    return int(radial_bins(np.array([rho]), delta)[0])


def angular_bin_counts(res: float) -> Tuple[int, int]:
    """Number of (phi, theta) bins at resolution ``res``."""
    if res <= 0:
        raise GeometryError(f"angular resolution must be > 0, got {res}")
    return math.ceil(2 * math.pi / res), math.ceil(math.pi / res)


def angular_bins(
    phi: FloatArray, theta: FloatArray, res: float
) -> Tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    """Vectorised ``angular_bin``."""
    n_phi, n_theta = angular_bin_counts(res)
    phi_bin = np.floor((np.asarray(phi) + math.pi) / res).astype(np.int64)
    theta_bin = np.floor(np.asarray(theta) / res).astype(np.int64)
    return (
        np.clip(phi_bin, 0, n_phi - 1),
        np.clip(theta_bin, 0, n_theta - 1),
    )


def angular_bin(s: SphericalPoint, res: float) -> AngularBinIndex:
    """Bin a direction on a regular (phi, theta) grid."""
    phi_bin, theta_bin = angular_bins(
        np.array([s.phi]), np.array([s.theta]), res
    )
    return AngularBinIndex(int(phi_bin[0]), int(theta_bin[0]))

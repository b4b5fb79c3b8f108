"""Cartesian REM grid export and read-back.

A grid file is a JSON header plus a data file next to it. Cells are
ordered x-major: ``index = (ix * ny + iy) * nz + iz``.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Tuple, Union

import numpy as np
import numpy.typing as npt
import pandas as pd

from .config import GridConfig
from .errors import DataError, GeometryError, ModelFormatError
from .geometry import RangeArray

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
Predictor = Callable[[FloatArray], FloatArray]
Vec3 = Tuple[float, float, float]

GRID_FORMAT = "remseq-rem-grid"
GRID_VERSION = 1


@dataclass
class RemGrid:
    """Predicted RSRP (dBm) at Cartesian cell centres."""

    lower: Vec3
    cell: Vec3
    shape: Tuple[int, int, int]
    values: FloatArray
    fill_value: float = -9999.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.shape[0] != int(np.prod(self.shape)):
            raise DataError(
                f"grid holds {self.values.shape[0]} values but shape "
                f"{self.shape} needs {int(np.prod(self.shape))}"
            )

    @property
    def upper(self) -> Vec3:
        """Upper box corner."""
        return tuple(  # type: ignore[return-value]
            lo + n * c for lo, n, c in zip(self.lower, self.shape, self.cell)
        )

    def centers(self) -> FloatArray:
        """``(n, 3)`` cell centres in storage order."""
        axes = [
            lo + (np.arange(n) + 0.5) * c
            for lo, n, c in zip(self.lower, self.shape, self.cell)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    def as_volume(self) -> FloatArray:
        """Values shaped ``(nx, ny, nz)``."""
        return self.values.reshape(self.shape)

    def header(self) -> Dict[str, Any]:
        """Self-describing metadata written next to the data."""
        return {
            "format": GRID_FORMAT,
            "version": GRID_VERSION,
            "lower": list(self.lower),
            "upper": list(self.upper),
            "cell": list(self.cell),
            "shape": list(self.shape),
            "order": "x-major (ix, iy, iz)",
            "units": "dBm",
            "fill_value": self.fill_value,
        }


def grid_shape(cfg: GridConfig) -> Tuple[int, int, int]:
    """Cell counts along x, y and z (at least one each)."""
    counts = [
        max(1, math.ceil((hi - lo) / c - 1e-9))
        for lo, hi, c in zip(cfg.lower, cfg.upper, cfg.cell)
    ]
    return (counts[0], counts[1], counts[2])


def export_rem_grid(
    predictor: Predictor, cfg: GridConfig, delta: RangeArray
) -> RemGrid:
    """Evaluate ``predictor`` at every cell centre inside the r_max sphere.

    The box must fit inside the cube of half-width ``r_max``; cells whose
    centre lies outside the sphere (or on the BS) get ``cfg.fill_value``.
    """
    reach = delta.r_max
    for lo, hi in zip(cfg.lower, cfg.upper):
        if lo < -reach or hi > reach:
            raise GeometryError(
                f"grid box {cfg.lower}..{cfg.upper} exceeds r_max={reach} m"
            )
    shape = grid_shape(cfg)
    grid = RemGrid(
        lower=cfg.lower,
        cell=cfg.cell,
        shape=shape,
        values=np.full(int(np.prod(shape)), cfg.fill_value),
        fill_value=cfg.fill_value,
    )
    if any(
        g - u > 1e-9 * c for g, u, c in zip(grid.upper, cfg.upper, cfg.cell)
    ):
        logger.warning(
            f"Grid box {cfg.lower}..{cfg.upper} is not a whole number of "
            f"{cfg.cell} m cells; upper corner extends to {grid.upper}"
        )
    centers = grid.centers()
    rho = np.linalg.norm(centers, axis=1)
    inside = (rho > 0.0) & (rho <= reach)
    if np.any(inside):
        grid.values[inside] = np.asarray(
            predictor(centers[inside]), dtype=np.float64
        )
    logger.info(
        f"Evaluated {int(inside.sum())} of {grid.values.shape[0]} grid cells "
        f"(shape {grid.shape})"
    )
    return grid


def write_rem_grid(
    grid: RemGrid, path: Union[str, Path], fmt: str = "binary"
) -> Tuple[Path, Path]:
    """Write ``<path>.json`` plus ``<path>.bin`` or ``<path>.csv``.

    Binary data is raw little-endian float64 in storage order. Returns the
    (header, data) paths.
    """
    base = Path(path)
    header = grid.header()
    if fmt == "binary":
        data_path = base.with_suffix(".bin")
        data_path.write_bytes(grid.values.astype("<f8").tobytes())
        header["dtype"] = "<f8"
    elif fmt == "csv":
        data_path = base.with_suffix(".csv")
        centers = grid.centers()
        pd.DataFrame(
            {
                "x": centers[:, 0],
                "y": centers[:, 1],
                "z": centers[:, 2],
                "rsrp_dbm": grid.values,
            }
        ).to_csv(data_path, index=False, float_format="%.17g")
    else:
        raise ValueError(f"unknown grid format {fmt!r}")
    header["data_file"] = data_path.name
    header["data_format"] = fmt
    header_path = base.with_suffix(".json")
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    logger.info(f"Wrote REM grid to {header_path} and {data_path}")
    return header_path, data_path


def read_rem_grid(path: Union[str, Path]) -> RemGrid:
    """Load a grid from its JSON header."""
    header_path = Path(path).with_suffix(".json")
    try:
        header = json.loads(header_path.read_text())
    except (OSError, ValueError) as e:
        raise ModelFormatError(
            f"Cannot read grid header {header_path}: {e}"
        ) from e
    if header.get("format") != GRID_FORMAT:
        raise ModelFormatError(f"{header_path} is not a REM grid header")
    if header.get("version") != GRID_VERSION:
        raise ModelFormatError(
            f"grid version {header.get('version')} is not supported"
        )
    data_path = header_path.parent / header["data_file"]
    if header["data_format"] == "binary":
        values = np.frombuffer(data_path.read_bytes(), dtype="<f8")
    else:
        frame = pd.read_csv(data_path, float_precision="round_trip")
        values = frame["rsrp_dbm"].to_numpy(dtype=np.float64)
    lower, cell, shape = header["lower"], header["cell"], header["shape"]
    return RemGrid(
        lower=(lower[0], lower[1], lower[2]),
        cell=(cell[0], cell[1], cell[2]),
        shape=(shape[0], shape[1], shape[2]),
        values=values.astype(np.float64),
        fill_value=float(header["fill_value"]),
    )

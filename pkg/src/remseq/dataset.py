"""Measurement sets: CSV ingestion, RSRP filtering and canonical export."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Any,
    Dict,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import numpy.typing as npt
import pandas as pd

from .config import SchemaMapping
from .errors import DataError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

EARTH_RADIUS_M = 6371008.8
_NON_FINITE_TOKENS = {"nan", "inf", "+inf", "-inf", "infinity", "-infinity"}


@dataclass
class MeasurementSet:
    """(position, RSRP) samples in the BS-centred Cartesian frame."""

    xyz: FloatArray
    rsrp_dbm: FloatArray
    altitude_label: Optional[npt.NDArray[Any]] = None
    timestamp: Optional[npt.NDArray[Any]] = None
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.rsrp_dbm = np.asarray(self.rsrp_dbm, dtype=np.float64).ravel()
        if self.xyz.shape[0] != self.rsrp_dbm.shape[0]:
            raise DataError(
                f"{self.xyz.shape[0]} positions but "
                f"{self.rsrp_dbm.shape[0]} RSRP values"
            )
        if not np.all(np.isfinite(self.xyz)):
            raise DataError("measurement coordinates must be finite")
        for name in ("altitude_label", "timestamp"):
            column = getattr(self, name)
            if column is not None:
                column = np.asarray(column, dtype=object)
                if column.shape[0] != len(self):
                    raise DataError(f"{name} length mismatch")
                setattr(self, name, column)

    def __len__(self) -> int:
        return int(self.rsrp_dbm.shape[0])

    def subset(
        self, index: Union[Sequence[int], npt.NDArray[Any]]
    ) -> "MeasurementSet":
        """Rows at ``index`` (integer positions or boolean mask)."""
        idx = np.asarray(index)
        return MeasurementSet(
            xyz=self.xyz[idx],
            rsrp_dbm=self.rsrp_dbm[idx],
            altitude_label=(
                self.altitude_label[idx]
                if self.altitude_label is not None
                else None
            ),
            timestamp=(
                self.timestamp[idx] if self.timestamp is not None else None
            ),
            provenance=dict(self.provenance),
        )

    def labels(self) -> list:
        """Distinct altitude labels in first-seen order."""
        if self.altitude_label is None:
            return []
        return list(dict.fromkeys(self.altitude_label.tolist()))

    def by_altitude(self, labels: Iterable[str]) -> "MeasurementSet":
        """Rows whose altitude label is in ``labels``."""
        if self.altitude_label is None:
            raise DataError("measurement set has no altitude labels")
        wanted = list(labels)
        missing = [lab for lab in wanted if lab not in self.labels()]
        if missing:
            raise DataError(f"missing altitude label(s): {missing}")
        return self.subset(np.isin(self.altitude_label, wanted))

    @classmethod
    def concat(cls, sets: Sequence["MeasurementSet"]) -> "MeasurementSet":
        """Stack several sets; labels are kept only if all sets carry them."""
        if not sets:
            raise DataError("nothing to concatenate")
        labels = (
            np.concatenate([s.altitude_label for s in sets])  # type: ignore
            if all(s.altitude_label is not None for s in sets)
            else None
        )
        return cls(
            xyz=np.vstack([s.xyz for s in sets]),
            rsrp_dbm=np.concatenate([s.rsrp_dbm for s in sets]),
            altitude_label=labels,
            provenance={"sources": [s.provenance for s in sets]},
        )

    def to_frame(self) -> pd.DataFrame:
        """Canonical DataFrame (x, y, z, rsrp_dbm[, altitude_label, ...])."""
        frame = pd.DataFrame(
            {
                "x": self.xyz[:, 0],
                "y": self.xyz[:, 1],
                "z": self.xyz[:, 2],
                "rsrp_dbm": self.rsrp_dbm,
            }
        )
        if self.altitude_label is not None:
            frame["altitude_label"] = self.altitude_label
        if self.timestamp is not None:
            frame["timestamp"] = self.timestamp
        return frame

    def to_csv(self, path: Union[str, Path]) -> None:
        """Write the canonical CSV."""
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        logger.info(f"Wrote {len(self)} measurements to {path}")


def canonical_mapping() -> SchemaMapping:
    """Schema of files written by ``MeasurementSet.to_csv``."""
    return SchemaMapping(
        x="x",
        y="y",
        z="z",
        rsrp="rsrp_dbm",
        altitude_label="altitude_label",
    )


def geodetic_to_local(
    lat: FloatArray,
    lon: FloatArray,
    alt: FloatArray,
    origin: Tuple[float, float, float],
) -> FloatArray:
    """East/north/up metres around ``origin`` on a local tangent plane."""
    lat0, lon0, alt0 = origin
    k = math.pi / 180.0 * EARTH_RADIUS_M
    east = (np.asarray(lon) - lon0) * k * math.cos(math.radians(lat0))
    north = (np.asarray(lat) - lat0) * k
    up = np.asarray(alt) - alt0
    return np.column_stack([east, north, up]).astype(np.float64)


def label_by_altitude(
    z: FloatArray, altitudes: Dict[str, float]
) -> npt.NDArray[Any]:
    """Label each height with the nearest configured altitude slice."""
    names = list(altitudes)
    heights = np.array([altitudes[n] for n in names], dtype=np.float64)
    nearest = np.argmin(np.abs(np.asarray(z)[:, None] - heights), axis=1)
    return np.asarray([names[i] for i in nearest], dtype=object)


def _parse_numeric(
    frame: pd.DataFrame, columns: Sequence[str]
) -> Tuple[pd.DataFrame, pd.Series, pd.Series]:
    parsed = pd.DataFrame(index=frame.index)
    malformed = pd.Series(False, index=frame.index)
    non_finite = pd.Series(False, index=frame.index)
    for col in columns:
        raw = frame[col].astype(str).str.strip()
        values = pd.to_numeric(raw, errors="coerce")
        token = raw.str.lower().isin(_NON_FINITE_TOKENS)
        malformed |= values.isna() & ~token
        non_finite |= token | ~np.isfinite(values.fillna(0.0))
        parsed[col] = values
    return parsed, malformed, non_finite & ~malformed


def ingest_csv(
    path: Union[str, Path],
    mapping: Optional[SchemaMapping] = None,
    rsrp_floor_dbm: float = -120.0,
    bs_origin: Optional[Tuple[float, float, float]] = None,
    max_malformed_frac: float = 0.01,
    altitudes: Optional[Dict[str, float]] = None,
) -> MeasurementSet:
    """Read, unit-check and filter a measurement CSV.

    Every row ends up either as a record or in exactly one drop bucket
    (``malformed``, ``non_finite``, ``below_floor``), reported under
    ``provenance["dropped"]``.
    """
    mapping = mapping or SchemaMapping()
    overlong: List[List[str]] = []

    def _record_overlong(fields: List[str]) -> None:
        overlong.append(fields)
        return None

    try:
        frame = pd.read_csv(
            path,
            dtype=str,
            keep_default_na=False,
            engine="python",
            on_bad_lines=_record_overlong,
        )
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path} is empty") from e
    except pd.errors.ParserError as e:
        raise DataError(f"Cannot parse {path}: {e}") from e
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e
    # short rows come back padded with NaN; they count as malformed
    frame = frame.fillna("")
    n_rows = len(frame) + len(overlong)
    if n_rows == 0:
        raise DataError(f"{path} has no data rows")

    if mapping.geodetic:
        if bs_origin is None:
            raise DataError("lat/lon input requires a declared BS origin")
        pos_cols = [mapping.lat, mapping.lon, mapping.alt]
    else:
        pos_cols = [mapping.x, mapping.y, mapping.z]
    if any(c is None for c in pos_cols):
        raise DataError("schema mapping lacks position columns")
    numeric_cols = [str(c) for c in pos_cols] + [mapping.rsrp]
    extra_cols = [
        c for c in (mapping.altitude_label, mapping.timestamp) if c
    ]
    missing = [c for c in numeric_cols + extra_cols if c not in frame]
    if missing:
        raise DataError(f"{path} is missing column(s): {missing}")

    parsed, malformed, non_finite = _parse_numeric(frame, numeric_cols)
    n_malformed = int(malformed.sum()) + len(overlong)
    if n_malformed > max_malformed_frac * n_rows:
        raise DataError(
            f"{n_malformed} of {n_rows} rows in {path} are malformed "
            f"(limit {max_malformed_frac:.1%})"
        )
    valid = ~malformed & ~non_finite
    below = valid & (parsed[mapping.rsrp] < rsrp_floor_dbm)
    keep = (valid & ~below).to_numpy()
    dropped = {
        "malformed": n_malformed,
        "non_finite": int(non_finite.sum()),
        "below_floor": int(below.sum()),
    }
    for reason, count in dropped.items():
        if count:
            logger.warning(f"Dropped {count} row(s) from {path}: {reason}")

    pos = parsed[[str(c) for c in pos_cols]].to_numpy(dtype=np.float64)[keep]
    if mapping.geodetic:
        assert bs_origin is not None
        xyz = geodetic_to_local(pos[:, 0], pos[:, 1], pos[:, 2], bs_origin)
    else:
        xyz = pos
    labels = None
    if mapping.altitude_label:
        labels = frame[mapping.altitude_label].to_numpy(dtype=object)[keep]
    elif altitudes:
        labels = label_by_altitude(xyz[:, 2], altitudes)
    timestamps = (
        frame[mapping.timestamp].to_numpy(dtype=object)[keep]
        if mapping.timestamp
        else None
    )
    records = MeasurementSet(
        xyz=xyz,
        rsrp_dbm=parsed[mapping.rsrp].to_numpy(dtype=np.float64)[keep],
        altitude_label=labels,
        timestamp=timestamps,
        provenance={
            "source": str(path),
            "rows_read": n_rows,
            "rsrp_floor_dbm": rsrp_floor_dbm,
            "dropped": dropped,
        },
    )
    logger.info(
        f"Ingested {len(records)} of {n_rows} rows from {path} "
        f"(floor {rsrp_floor_dbm} dBm)"
    )
    return records


def read_measurements(path: Union[str, Path]) -> MeasurementSet:
    """Read a canonical CSV written by ``MeasurementSet.to_csv``.

    No RSRP floor is applied.
    """
    header = pd.read_csv(path, nrows=0).columns
    mapping = canonical_mapping()
    if "altitude_label" not in header:
        mapping = mapping.model_copy(update={"altitude_label": None})
    return ingest_csv(path, mapping, rsrp_floor_dbm=-math.inf)

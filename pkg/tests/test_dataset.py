"""Tests for measurement ingestion and export."""

import math
from pathlib import Path

import numpy as np
import pytest

from remseq.config import SchemaMapping
from remseq.dataset import (
    MeasurementSet,
    geodetic_to_local,
    ingest_csv,
    label_by_altitude,
    read_measurements,
)
from remseq.errors import DataError


def _write(path: Path, rows: list) -> Path:
    path.write_text("\n".join(rows) + "\n")
    return path


def test_ingest_filters_floor_and_bad_rows(tmp_path: Path) -> None:
    """Test every row is kept or dropped for exactly one reason."""
    path = _write(
        tmp_path / "m.csv",
        [
            "x,y,z,rsrp",
            "10,0,50,-80",
            "20,0,50,-121",
            "30,0,50,-120",
            "40,0,50,nan",
            "50,0,50,inf",
            "abc,0,50,-90",
        ]
        + [f"{60 + i},0,50,-85" for i in range(100)],
    )
    data = ingest_csv(path, rsrp_floor_dbm=-120.0)

    assert len(data) == 102
    assert data.rsrp_dbm.min() == -120.0
    dropped = data.provenance["dropped"]
    assert dropped == {"malformed": 1, "non_finite": 2, "below_floor": 1}
    assert data.provenance["rows_read"] == len(data) + sum(dropped.values())


def test_ingest_malformed_threshold(tmp_path: Path) -> None:
    """Test too many unparsable rows abort ingestion."""
    path = _write(
        tmp_path / "m.csv", ["x,y,z,rsrp", "1,0,50,-80", "oops,0,50,-80"]
    )
    with pytest.raises(DataError, match="malformed"):
        ingest_csv(path)
    assert len(ingest_csv(path, max_malformed_frac=0.5)) == 1


def test_ingest_counts_rows_with_extra_fields(tmp_path: Path) -> None:
    """Test a row with too many fields is dropped as malformed."""
    rows = ["x,y,z,rsrp"] + [f"{i},0,50,-80" for i in range(200)]
    path = _write(tmp_path / "m.csv", rows + ["1,2,3,-80,EXTRA"])
    data = ingest_csv(path)

    assert len(data) == 200
    assert data.provenance["dropped"]["malformed"] == 1
    assert data.provenance["rows_read"] == 201


def test_ingest_extra_fields_count_toward_limit(tmp_path: Path) -> None:
    """Test over-long rows trip the malformed-row limit."""
    rows = ["x,y,z,rsrp"] + [f"{i},0,50,-80" for i in range(20)]
    path = _write(tmp_path / "m.csv", rows + ["1,2,3,-80,EXTRA"] * 3)
    with pytest.raises(DataError, match="3 of 23 rows"):
        ingest_csv(path)


def test_ingest_short_row_is_malformed(tmp_path: Path) -> None:
    """Test a row missing trailing fields is dropped as malformed."""
    rows = ["x,y,z,rsrp"] + [f"{i},0,50,-80" for i in range(200)]
    data = ingest_csv(_write(tmp_path / "m.csv", rows + ["1,2,3"]))

    assert len(data) == 200
    assert data.provenance["dropped"]["malformed"] == 1


def test_ingest_missing_column(tmp_path: Path) -> None:
    """Test a missing mapped column is reported by name."""
    path = _write(tmp_path / "m.csv", ["x,y,rsrp", "1,2,-80"])
    with pytest.raises(DataError, match="'z'"):
        ingest_csv(path)


def test_ingest_empty_file(tmp_path: Path) -> None:
    """Test empty inputs raise DataError."""
    with pytest.raises(DataError):
        ingest_csv(_write(tmp_path / "empty.csv", ["x,y,z,rsrp"]))
    (tmp_path / "blank.csv").write_text("")
    with pytest.raises(DataError):
        ingest_csv(tmp_path / "blank.csv")


def test_ingest_custom_mapping_and_labels(tmp_path: Path) -> None:
    """Test renamed columns and nearest-altitude labelling."""
    path = _write(
        tmp_path / "m.csv",
        ["east,north,up,power", "1,2,48,-70", "3,4,72,-75", "5,6,112,-79"],
    )
    mapping = SchemaMapping(x="east", y="north", z="up", rsrp="power")
    data = ingest_csv(
        path, mapping, altitudes={"A": 50.0, "B": 70.0, "D": 110.0}
    )
    assert data.xyz.tolist() == [[1, 2, 48], [3, 4, 72], [5, 6, 112]]
    assert data.altitude_label is not None
    assert data.altitude_label.tolist() == ["A", "B", "D"]


def test_ingest_geodetic(tmp_path: Path) -> None:
    """Test lat/lon/alt input becomes local east/north/up metres."""
    path = _write(
        tmp_path / "m.csv",
        ["lat,lon,alt,rsrp", "35.001,-78.0,150,-80", "35.0,-78.001,100,-81"],
    )
    mapping = SchemaMapping(
        x=None, y=None, z=None, lat="lat", lon="lon", alt="alt"
    )
    with pytest.raises(DataError, match="origin"):
        ingest_csv(path, mapping)

    data = ingest_csv(path, mapping, bs_origin=(35.0, -78.0, 100.0))
    metres_per_deg = math.pi / 180.0 * 6371008.8
    assert data.xyz[0] == pytest.approx([0.0, 0.001 * metres_per_deg, 50.0])
    assert data.xyz[1, 0] == pytest.approx(
        -0.001 * metres_per_deg * math.cos(math.radians(35.0))
    )


def test_geodetic_origin_maps_to_zero() -> None:
    """Test the BS origin sits at (0, 0, 0)."""
    xyz = geodetic_to_local(
        np.array([12.5]), np.array([-3.0]), np.array([8.0]), (12.5, -3.0, 8.0)
    )
    assert xyz.tolist() == [[0.0, 0.0, 0.0]]


def test_label_by_altitude() -> None:
    """Test nearest-slice labels."""
    labels = label_by_altitude(
        np.array([49.0, 61.0, 95.0]), {"A": 50.0, "B": 70.0, "C": 90.0}
    )
    assert labels.tolist() == ["A", "B", "C"]


class TestMeasurementSet:
    """The in-memory measurement container."""

    def _data(self) -> MeasurementSet:
        return MeasurementSet(
            xyz=np.arange(12, dtype=float).reshape(4, 3) + 1.0,
            rsrp_dbm=np.array([-70.0, -71.0, -72.0, -73.0]),
            altitude_label=np.array(["A", "B", "A", "C"], dtype=object),
        )

    def test_length_mismatch(self) -> None:
        """Test positions and values must pair up."""
        with pytest.raises(DataError):
            MeasurementSet(xyz=np.zeros((3, 3)), rsrp_dbm=np.zeros(2))

    def test_non_finite_positions(self) -> None:
        """Test NaN positions are rejected."""
        with pytest.raises(DataError):
            MeasurementSet(
                xyz=np.array([[np.nan, 0.0, 0.0]]), rsrp_dbm=np.zeros(1)
            )

    def test_by_altitude(self) -> None:
        """Test selection by label."""
        data = self._data()
        assert data.labels() == ["A", "B", "C"]
        subset = data.by_altitude(["A", "C"])
        assert subset.rsrp_dbm.tolist() == [-70.0, -72.0, -73.0]
        with pytest.raises(DataError, match="missing altitude"):
            data.by_altitude(["D"])

    def test_by_altitude_without_labels(self) -> None:
        """Test unlabeled sets cannot be split by altitude."""
        data = MeasurementSet(xyz=np.ones((1, 3)), rsrp_dbm=[-80.0])
        with pytest.raises(DataError):
            data.by_altitude(["A"])

    def test_concat(self) -> None:
        """Test stacking keeps order and labels."""
        data = self._data()
        both = MeasurementSet.concat([data.subset([0]), data.subset([3])])
        assert both.rsrp_dbm.tolist() == [-70.0, -73.0]
        assert both.altitude_label is not None
        assert both.altitude_label.tolist() == ["A", "C"]
        with pytest.raises(DataError):
            MeasurementSet.concat([])

    def test_csv_round_trip(self, tmp_path: Path) -> None:
        """Test canonical CSV export reads back to full precision."""
        rng = np.random.default_rng(5)
        data = MeasurementSet(
            xyz=rng.uniform(-300.0, 300.0, size=(25, 3)),
            rsrp_dbm=rng.uniform(-130.0, -40.0, size=25),
            altitude_label=np.array(["A"] * 25, dtype=object),
        )
        path = tmp_path / "m.csv"
        data.to_csv(path)

        back = read_measurements(path)
        np.testing.assert_allclose(back.xyz, data.xyz, rtol=1e-14)
        np.testing.assert_allclose(back.rsrp_dbm, data.rsrp_dbm, rtol=1e-14)
        assert back.labels() == ["A"]

"""Tests for run manifests."""

import hashlib
from pathlib import Path

from remseq.manifest import (
    MANIFEST_NAME,
    RunManifest,
    file_sha256,
    load_manifest,
    package_versions,
)


def test_file_sha256(tmp_path: Path) -> None:
    """Test the checksum format."""
    path = tmp_path / "a.txt"
    path.write_bytes(b"remseq")
    expected = hashlib.sha256(b"remseq").hexdigest()
    assert file_sha256(path) == f"sha256:{expected}"


def test_package_versions() -> None:
    """Test the interpreter and numpy are always reported."""
    versions = package_versions()
    assert "python" in versions
    assert versions["numpy"] != ""


def test_manifest_round_trip(tmp_path: Path) -> None:
    """Test inputs, outputs and seeds survive save and load."""
    source = tmp_path / "in.csv"
    source.write_text("x,y,z,rsrp\n")
    produced = tmp_path / "out.csv"
    produced.write_text("x,y,z,rsrp_dbm\n")

    manifest = RunManifest.start(
        "synth",
        {"seed": 3},
        {"seed": 3},
        inputs=[source, None, tmp_path / "absent.csv"],
    )
    manifest.add_output(produced)
    target = manifest.save(tmp_path)

    assert target.name == MANIFEST_NAME
    loaded = load_manifest(target)
    assert loaded.command == "synth"
    assert loaded.seeds == {"seed": 3}
    assert list(loaded.inputs) == [str(source)]
    assert loaded.outputs == {"out.csv": file_sha256(produced)}

"""Machine-readable run manifests."""

import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
_TRACKED_PACKAGES = ("remseq", "numpy", "scipy", "pandas", "pydantic")


def file_sha256(path: Union[str, Path]) -> str:
    """Checksum in ``sha256:<hex>`` form."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return f"sha256:{digest.hexdigest()}"


def package_versions() -> Dict[str, str]:
    """Interpreter and library versions."""
    versions = {"python": platform.python_version()}
    for name in _TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


@dataclass
class RunManifest:
    """What a CLI run consumed and produced."""

    command: str
    argv: List[str]
    config: Dict[str, Any]
    seeds: Dict[str, int]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=package_versions)

    @classmethod
    def start(
        cls,
        command: str,
        config: Dict[str, Any],
        seeds: Dict[str, int],
        inputs: Sequence[Optional[Union[str, Path]]] = (),
    ) -> "RunManifest":
        """Record the command and checksum its input files."""
        manifest = cls(
            command=command,
            argv=list(sys.argv[1:]),
            config=config,
            seeds=dict(seeds),
        )
        for path in inputs:
            if path is not None and Path(path).is_file():
                manifest.inputs[str(path)] = file_sha256(path)
        return manifest

    def add_output(self, path: Union[str, Path]) -> None:
        """Checksum one produced file."""
        self.outputs[Path(path).name] = file_sha256(path)

    def save(self, out_dir: Union[str, Path]) -> Path:
        """Write ``manifest.json`` into ``out_dir``."""
        target = Path(out_dir) / MANIFEST_NAME
        target.write_text(
            json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"
        )
        logger.info(f"Run manifest written to {target}")
        return target


def load_manifest(path: Union[str, Path]) -> RunManifest:
    """Read a manifest written by ``RunManifest.save``."""
    data = json.loads(Path(path).read_text())
    return RunManifest(**data)

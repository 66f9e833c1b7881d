"""Run manifests written next to every command's outputs."""

import hashlib
from datetime import datetime, timezone
from pathlib import Path

from pydantic import BaseModel, Field


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManifest(BaseModel):
    """What produced a set of outputs."""

    command: str
    config_hash: str | None = None
    tabular_version: str | None = None
    guidelines_version: str | None = None
    backend_fingerprints: dict[str, str] = {}
    stages: str | None = None
    input_hashes: dict[str, str] = {}
    outputs: dict[str, str] = {}
    started_at: str = Field(default_factory=_now)
    finished_at: str | None = None

    def add_input(self, name: str, path: str | Path) -> None:
        self.input_hashes[name] = file_sha256(path)

    def finish(self, path: str | Path) -> Path:
        """Stamp the end time and write the manifest as JSON."""
        self.finished_at = _now()
        target = Path(path)
        target.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return target


def manifest_path(output: str | Path) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")

"""Content-addressed on-disk cache for guideline summaries."""

import hashlib
import json
import logging
import os
import tempfile
from collections.abc import Iterator
from pathlib import Path
from typing import TYPE_CHECKING

from pydantic import ValidationError

if TYPE_CHECKING:
    from .guidelines import GuidelineSummary

logger = logging.getLogger(__name__)

CACHE_FORMAT = "1"


def cache_key(code: str, version: str, backend_fingerprint: str) -> str:
    payload = json.dumps([CACHE_FORMAT, code, version, backend_fingerprint], separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class SummaryCache:
    """
    Directory of JSON files named by the hash of (code, version, backend fingerprint).

    Writes go through a temporary file and an atomic rename, so concurrent
    writers of the same key leave one complete entry behind.
    """

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)

    def _path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.json"

    def get(self, code: str, version: str, backend_fingerprint: str) -> "GuidelineSummary | None":
        from .guidelines import GuidelineSummary

        key = cache_key(code, version, backend_fingerprint)
        path = self._path(key)
        if not path.exists():
            return None
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
            if record.get("key") != key:
                raise ValueError("key mismatch")
            return GuidelineSummary.model_validate(record["summary"])
        except (OSError, ValueError, KeyError, TypeError, ValidationError) as e:
            logger.warning("Ignoring corrupt cache entry %s: %s", path, e)
            return None

    def put(self, summary: "GuidelineSummary") -> Path:
        key = cache_key(summary.code, summary.version, summary.backend_fingerprint)
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {"key": key, "summary": summary.model_dump(mode="json")}
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(record, f, sort_keys=True)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return path

    def __iter__(self) -> Iterator["GuidelineSummary"]:
        from .guidelines import GuidelineSummary

        if not self.directory.exists():
            return
        for path in sorted(self.directory.glob("*/*.json")):
            try:
                record = json.loads(path.read_text(encoding="utf-8"))
                yield GuidelineSummary.model_validate(record["summary"])
            except (OSError, ValueError, KeyError, TypeError, ValidationError) as e:
                logger.warning("Skipping corrupt cache entry %s: %s", path, e)

    def export(self, path: str | Path) -> int:
        """Write every cached summary as one JSON line, ordered by (code, version)."""
        summaries = sorted(self, key=lambda s: (s.code, s.version, s.backend_fingerprint))
        with open(path, "w", encoding="utf-8") as f:
            for summary in summaries:
                f.write(summary.model_dump_json() + "\n")
        return len(summaries)

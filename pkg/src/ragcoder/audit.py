"""Audit logging of pipeline runs as JSON lines."""

import json
import logging
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)


class AuditLogger:
    """Append-only run log; every record carries the run id."""

    def __init__(self, path: str | Path | None, run_id: str) -> None:
        self.path = Path(path) if path is not None else None
        self.run_id = run_id
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def log(
        self,
        action: str,
        note_id: str | None = None,
        step: str | None = None,
        status: str = "success",
        error_message: str | None = None,
        detail: dict[str, Any] | None = None,
    ) -> None:
        """Log an audit event."""
        record = {
            "time": datetime.now(timezone.utc).isoformat(),
            "run_id": self.run_id,
            "action": action,
            "note_id": note_id,
            "step": step,
            "status": status,
            "error_message": error_message,
            "detail": detail or {},
        }
        logger.debug("audit %s", record)
        if self.path is None:
            return
        line = json.dumps(record, sort_keys=True, default=str)
        with self._lock, open(self.path, "a", encoding="utf-8") as f:
            f.write(line + "\n")

    def log_stage(self, note_id: str, step: str, detail: dict[str, Any] | None = None) -> None:
        """Log a completed pipeline stage."""
        self.log(action="stage", note_id=note_id, step=step, detail=detail)

    def log_error(
        self,
        action: str,
        error_message: str,
        note_id: str | None = None,
        step: str | None = None,
        detail: dict[str, Any] | None = None,
    ) -> None:
        """Log an error."""
        self.log(
            action=action,
            note_id=note_id,
            step=step,
            status="error",
            error_message=error_message,
            detail=detail,
        )

"""Pipeline data models."""

from collections.abc import Iterable
from typing import Any, Literal

from pydantic import BaseModel, field_validator

from .codes import IcdCode

Step = Literal["1", "2", "3", "4", "SC"]
Action = Literal["generated", "retained", "removed", "replaced-by", "added", "replacement-target"]

ACTIVE_ACTIONS = frozenset({"generated", "retained", "added", "replacement-target"})
ORIGIN_ACTIONS = frozenset({"generated", "added", "replacement-target"})


class ClinicalNote(BaseModel):
    """One clinical note of an encounter."""

    note_id: str
    encounter_id: str
    note_type: str = ""
    text: str
    gold_codes: list[str] = []

    @field_validator("note_id", "encounter_id", "text")
    @classmethod
    def not_empty(cls, v: str) -> str:
        if not v or not v.strip():
            raise ValueError("must not be empty")
        return v


class TrailEntry(BaseModel):
    step: Step
    action: Action
    justification: str = ""
    related_code: str | None = None


class CandidateCode(BaseModel):
    """A code flowing through the pipeline with its evidence and provenance trail."""

    code: IcdCode
    description: str = ""
    evidence: list[str] = []
    unverified_evidence: list[str] = []
    unverifiable: bool = False
    trail: list[TrailEntry] = []

    @property
    def last_action(self) -> str | None:
        return self.trail[-1].action if self.trail else None

    @property
    def active(self) -> bool:
        return self.last_action in ACTIVE_ACTIONS

    def mark(
        self,
        step: Step,
        action: Action,
        justification: str = "",
        related_code: str | None = None,
    ) -> "CandidateCode":
        self.trail.append(
            TrailEntry(step=step, action=action, justification=justification, related_code=related_code)
        )
        return self


def final_codes(candidates: Iterable[CandidateCode]) -> list[str]:
    """Codes whose last trail action keeps them, sorted and unique."""
    return sorted({c.code for c in candidates if c.active})


class CodingResult(BaseModel):
    """Outcome of running the pipeline on one note."""

    note_id: str
    encounter_id: str
    status: Literal["ok", "failed"] = "ok"
    error: str | None = None
    failed_step: str | None = None
    codes: list[str] = []
    candidates: list[CandidateCode] = []
    snapshots: dict[str, list[str]] = {}
    summary_failures: dict[str, str] = {}
    conflicts: list[dict[str, str]] = []
    usage: dict[str, Any] = {}

    def to_prediction(self) -> dict[str, Any]:
        """Predictions JSONL record."""
        record: dict[str, Any] = {
            "note_id": self.note_id,
            "encounter_id": self.encounter_id,
            "codes": self.codes,
            "trails": [
                {
                    "code": c.code,
                    "description": c.description,
                    "evidence": c.evidence,
                    "unverified_evidence": c.unverified_evidence,
                    "trail": [t.model_dump(exclude_none=True) for t in c.trail],
                }
                for c in self.candidates
            ],
            "status": self.status,
        }
        if self.error:
            record["error"] = self.error
            record["failed_step"] = self.failed_step
        return record

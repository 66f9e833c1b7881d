"""Encounter-level evaluation: datasets, micro/macro metrics, code-space filters and Krippendorff's alpha."""

import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any, Literal

import krippendorff
import numpy as np
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from .codes import CodeScope, classify_code, in_scope
from .errors import DatasetError, DatasetValidationError, EvaluationError, InvalidCodeError
from .models import ClinicalNote

logger = logging.getLogger(__name__)

MacroUniverse = Literal["union", "gold"]


class Encounter(BaseModel):
    """All notes of one patient encounter."""

    encounter_id: str
    notes: list[ClinicalNote]

    @model_validator(mode="after")
    def notes_share_encounter(self) -> "Encounter":
        for note in self.notes:
            if note.encounter_id != self.encounter_id:
                raise ValueError(f"note {note.note_id} belongs to encounter {note.encounter_id}")
        return self

    @property
    def gold_codes(self) -> set[str]:
        return {code for note in self.notes for code in note.gold_codes}


class CodeSpaceFilter(BaseModel):
    allowed: frozenset[str]
    label: str = ""

    @field_validator("allowed")
    @classmethod
    def not_empty(cls, v: frozenset[str]) -> frozenset[str]:
        if not v:
            raise ValueError("a code-space filter needs at least one allowed code")
        return v

    @classmethod
    def from_file(cls, path: str | Path, label: str | None = None) -> "CodeSpaceFilter":
        """Read one code per line; blank lines and '#' comments are ignored."""
        allowed = set()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                allowed.add(classify_code(line)[1])
        return cls(allowed=frozenset(allowed), label=label or Path(path).stem)


class Metrics(BaseModel):
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0


class CodeCounts(BaseModel):
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def metrics(self) -> Metrics:
        return _metrics(self.tp, self.fp, self.fn)


class EvalReport(BaseModel):
    micro: Metrics
    macro: Metrics
    per_code: dict[str, CodeCounts]
    encounters: int
    filter: str | None = None
    scope: str = "diagnosis"
    macro_universe: MacroUniverse = "union"

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def render_table(self, method: str = "predictions") -> str:
        """Method x micro/macro x P/R/F1 table."""
        width = max(len(method), len("Method"))
        header = f"{'Method':<{width}} | {'Micro P':>8} {'Micro R':>8} {'Micro F1':>8} | {'Macro P':>8} {'Macro R':>8} {'Macro F1':>8}"
        row = (
            f"{method:<{width}} | {self.micro.precision:>8.4f} {self.micro.recall:>8.4f} {self.micro.f1:>8.4f} | "
            f"{self.macro.precision:>8.4f} {self.macro.recall:>8.4f} {self.macro.f1:>8.4f}"
        )
        return "\n".join([header, "-" * len(header), row])


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 0.0


def _f1(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def _metrics(tp: int, fp: int, fn: int) -> Metrics:
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return Metrics(precision=precision, recall=recall, f1=_f1(precision, recall))


def ingest_dataset(path: str | Path) -> list[Encounter]:
    """
    Read a dataset JSONL file into encounters, in first-seen order.

    Each line holds {note_id, encounter_id, note_type, text, gold_codes}; unknown
    fields are ignored. Procedure codes are kept as given.

    Raises:
        DatasetError: Unreadable file or duplicate note_id
        DatasetValidationError: One or more malformed lines, reported per line
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"Cannot read dataset {path}: {e}") from e

    notes: list[ClinicalNote] = []
    seen: dict[str, int] = {}
    errors: list[dict[str, Any]] = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            errors.append({"line": number, "error": f"invalid JSON: {e.msg}"})
            continue
        if not isinstance(record, dict):
            errors.append({"line": number, "error": "not a JSON object"})
            continue

        gold: list[str] = []
        bad = []
        for raw in record.get("gold_codes") or []:
            try:
                code = classify_code(raw)[1]
            except InvalidCodeError:
                bad.append(raw)
                continue
            if code not in gold:
                gold.append(code)
        if bad:
            errors.append({"line": number, "error": f"malformed gold code(s): {', '.join(map(str, bad))}"})
            continue

        try:
            note = ClinicalNote(
                note_id=str(record.get("note_id", "")),
                encounter_id=str(record.get("encounter_id", "")),
                note_type=record.get("note_type") or "",
                text=record.get("text") or "",
                gold_codes=gold,
            )
        except ValidationError as e:
            errors.append({"line": number, "error": str(e.errors()[0]["loc"][0]) + ": " + e.errors()[0]["msg"]})
            continue
        if note.note_id in seen:
            raise DatasetError(f"Duplicate note_id {note.note_id!r} on lines {seen[note.note_id]} and {number}")
        seen[note.note_id] = number
        notes.append(note)

    if errors:
        raise DatasetValidationError(errors)

    grouped: dict[str, list[ClinicalNote]] = {}
    for note in notes:
        grouped.setdefault(note.encounter_id, []).append(note)
    return [Encounter(encounter_id=eid, notes=group) for eid, group in grouped.items()]


def load_predictions(path: str | Path) -> dict[str, list[str]]:
    """Read predictions JSONL into note_id -> codes."""
    predictions: dict[str, list[str]] = {}
    try:
        with open(path, encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                record = json.loads(line)
                predictions[str(record["note_id"])] = list(record.get("codes") or [])
    except OSError as e:
        raise DatasetError(f"Cannot read predictions {path}: {e}") from e
    except (json.JSONDecodeError, KeyError) as e:
        raise DatasetError(f"Malformed predictions file {path} at line {number}: {e}") from e
    return predictions


def _scoped(codes: Iterable[str], scope: CodeScope) -> set[str]:
    result = set()
    for raw in codes:
        try:
            code = classify_code(raw)[1]
        except InvalidCodeError:
            logger.warning("Ignoring malformed predicted code %r", raw)
            continue
        if in_scope(code, scope):
            result.add(code)
    return result


def aggregate_encounter(
    encounter: Encounter,
    predictions: Mapping[str, Iterable[str]],
    scope: CodeScope = "all",
) -> tuple[set[str], set[str]]:
    """Union gold and predicted codes over the notes of an encounter."""
    gold: set[str] = set()
    predicted: set[str] = set()
    for note in encounter.notes:
        gold |= _scoped(note.gold_codes, scope)
        if note.note_id not in predictions:
            logger.warning("No prediction for note %s; treated as empty", note.note_id)
            continue
        predicted |= _scoped(predictions[note.note_id], scope)
    return gold, predicted


def aggregate_all(
    encounters: Sequence[Encounter],
    predictions: Mapping[str, Iterable[str]],
    scope: CodeScope = "all",
) -> list[tuple[set[str], set[str]]]:
    """
    Aggregate every encounter.

    Raises:
        EvaluationError: Predictions for note ids absent from the dataset
    """
    known = {note.note_id for e in encounters for note in e.notes}
    orphans = sorted(set(predictions) - known)
    if orphans:
        raise EvaluationError(f"Predictions for unknown note id(s): {', '.join(orphans)}")
    return [aggregate_encounter(e, predictions, scope) for e in encounters]


def score(
    pairs: Sequence[tuple[set[str], set[str]]],
    macro_universe: MacroUniverse = "union",
) -> EvalReport:
    """
    Micro and macro precision/recall/F1 over (gold, predicted) encounter pairs.

    Macro metrics average per-code precision, recall and F1 over the codes seen
    in gold or predictions ("union") or in gold only ("gold").
    """
    counts: dict[str, CodeCounts] = defaultdict(CodeCounts)
    for gold, predicted in pairs:
        for code in gold & predicted:
            counts[code].tp += 1
        for code in predicted - gold:
            counts[code].fp += 1
        for code in gold - predicted:
            counts[code].fn += 1

    tp = sum(c.tp for c in counts.values())
    fp = sum(c.fp for c in counts.values())
    fn = sum(c.fn for c in counts.values())

    if macro_universe == "gold":
        universe = sorted(code for code, c in counts.items() if c.tp + c.fn > 0)
    else:
        universe = sorted(counts)
    per_code = [counts[code].metrics() for code in universe]
    if per_code:
        macro = Metrics(
            precision=float(np.mean([m.precision for m in per_code])),
            recall=float(np.mean([m.recall for m in per_code])),
            f1=float(np.mean([m.f1 for m in per_code])),
        )
    else:
        macro = Metrics()

    return EvalReport(
        micro=_metrics(tp, fp, fn),
        macro=macro,
        per_code={code: counts[code] for code in sorted(counts)},
        encounters=len(pairs),
        macro_universe=macro_universe,
    )


def apply_filter(predictions: Mapping[str, Iterable[str]], code_filter: CodeSpaceFilter) -> dict[str, list[str]]:
    """Drop predicted codes outside the allowed code space; returns new predictions."""
    return {note_id: [c for c in codes if c in code_filter.allowed] for note_id, codes in predictions.items()}


def krippendorff_alpha(
    a: Mapping[str, Iterable[str]],
    b: Mapping[str, Iterable[str]],
    scope: CodeScope = "all",
) -> float:
    """
    Krippendorff's alpha between two code annotations over shared encounters.

    Units are (encounter, code) pairs for every in-scope code either annotation
    assigns in that encounter set; each unit carries two binary presence values
    and disagreement uses the nominal metric.

    Raises:
        EvaluationError: No overlapping encounters
    """
    shared = sorted(set(a) & set(b))
    if not shared:
        raise EvaluationError("Krippendorff's alpha is undefined: no overlapping encounters")
    if set(a) != set(b):
        logger.warning("Alpha computed over %d shared encounter(s); others ignored", len(shared))

    sets_a = {e: _scoped(a[e], scope) for e in shared}
    sets_b = {e: _scoped(b[e], scope) for e in shared}
    universe = sorted(set().union(*sets_a.values(), *sets_b.values()))
    if not universe:
        return 1.0

    values = np.array(
        [[code in sets_a[e], code in sets_b[e]] for e in shared for code in universe],
        dtype=float,
    )
    if values.min() == values.max():
        return 1.0
    return float(krippendorff.alpha(reliability_data=values.T, value_domain=[0.0, 1.0], level_of_measurement="nominal"))


def load_annotations(path: str | Path) -> dict[str, set[str]]:
    """
    Read an annotation file as encounter_id -> codes.

    Accepts dataset lines (gold_codes) or prediction lines (codes); codes of
    notes in the same encounter are unioned.
    """
    annotations: dict[str, set[str]] = defaultdict(set)
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                record = json.loads(line)
                codes = record.get("gold_codes", record.get("codes")) or []
                annotations[str(record["encounter_id"])].update(codes)
    except OSError as e:
        raise DatasetError(f"Cannot read annotations {path}: {e}") from e
    except (json.JSONDecodeError, KeyError) as e:
        raise DatasetError(f"Malformed annotation file {path}: {e}") from e
    return dict(annotations)


def evaluate(
    encounters: Sequence[Encounter],
    predictions: Mapping[str, Iterable[str]],
    scope: CodeScope = "diagnosis",
    macro_universe: MacroUniverse = "union",
    code_filter: CodeSpaceFilter | None = None,
) -> EvalReport:
    """Filter, aggregate and score predictions against a dataset."""
    if code_filter is not None:
        predictions = apply_filter(predictions, code_filter)
    report = score(aggregate_all(encounters, predictions, scope), macro_universe)
    report.scope = scope
    report.filter = code_filter.label if code_filter else None
    return report

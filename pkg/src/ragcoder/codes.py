"""ICD-10-CM code strings: normalization, ranges and reference extraction."""

import re
from typing import Annotated, Literal, NamedTuple

from pydantic import AfterValidator

from .errors import InvalidCodeError

CODE_PATTERN = re.compile(r"^[A-Z][0-9A-Z]{2}(\.[0-9A-Z]{1,4})?$")

# ICD-10-PCS: seven alphanumerics, no dot, letters I and O never used.
PROCEDURE_PATTERN = re.compile(r"^[0-9A-HJ-NP-Z]{7}$")

_CODE_TOKEN = r"[A-Z][0-9][0-9A-Z](?:\.[0-9A-Z]{1,4})?"
_REF_PATTERN = re.compile(
    rf"(?<![A-Za-z0-9.])({_CODE_TOKEN})(\.?-({_CODE_TOKEN})?)?(?![A-Za-z0-9])"
)

CodeScope = Literal["diagnosis", "procedure", "all"]


def normalize_code(raw: str) -> str:
    """
    Normalize an ICD-10-CM code.

    Uppercases, strips whitespace and re-inserts a single dot after the
    three-character category. ``normalize_code(normalize_code(x)) == normalize_code(x)``.

    Raises:
        InvalidCodeError: If the result does not match the code pattern
    """
    if not isinstance(raw, str):
        raise InvalidCodeError(str(raw))
    compact = raw.strip().upper().replace(".", "")
    code = compact if len(compact) <= 3 else f"{compact[:3]}.{compact[3:]}"
    if not CODE_PATTERN.match(code):
        raise InvalidCodeError(raw)
    return code


IcdCode = Annotated[str, AfterValidator(normalize_code)]


def category(code: str) -> str:
    """Return the three-character category of a code."""
    return code.replace(".", "")[:3]


def compact(code: str) -> str:
    """Return a code without its dot."""
    return code.replace(".", "")


def is_procedure_code(raw: str) -> bool:
    """
    Check whether a dotless code is ICD-10-PCS rather than ICD-10-CM.

    Seven-character ICD-10-CM codes are often stored without their dot, so the
    shape alone is ambiguous. PCS sections are 0-9, B-D, F-H and X; of those
    letters only H and X also open seven-character ICD-10-CM codes, which always
    continue with a digit (H40.1130) or two digits (X00.0XXA).
    """
    code = raw.strip().upper() if isinstance(raw, str) else ""
    if "." in code or not PROCEDURE_PATTERN.match(code):
        return False
    first, second, third = code[0], code[1], code[2]
    if first.isdigit() or first in "BCDFG":
        return True
    if first == "H":
        return not second.isdigit()
    if first == "X":
        return not (second.isdigit() and third.isdigit())
    return False


def classify_code(raw: str) -> tuple[Literal["diagnosis", "procedure"], str]:
    """
    Classify a dataset code as ICD-10-CM diagnosis or ICD-10-PCS procedure.

    Diagnosis codes come back normalized, with or without their dot in the input.

    Raises:
        InvalidCodeError: If the code is neither
    """
    if is_procedure_code(raw):
        return "procedure", raw.strip().upper()
    return "diagnosis", normalize_code(raw)


def in_scope(raw: str, scope: CodeScope) -> bool:
    """Check whether an already-classified code belongs to a scope."""
    if scope == "all":
        return True
    kind = "procedure" if is_procedure_code(raw) else "diagnosis"
    return kind == scope


class CodeRange(NamedTuple):
    """Inclusive range of codes, e.g. I10-I16. A single code is a range with start == end."""

    start: str
    end: str

    @classmethod
    def parse(cls, text: str) -> "CodeRange":
        """Parse ``"I10-I16"``, ``"I10"`` or ``"R03.0-"``."""
        text = text.strip().rstrip("-").rstrip(".")
        if "-" in text:
            start, end = text.split("-", 1)
            return cls(normalize_code(start), normalize_code(end))
        code = normalize_code(text)
        return cls(code, code)

    def contains(self, code: str) -> bool:
        """
        Check containment under category-string ordering.

        A code C is in A-B iff A <= prefix(C) <= B, where each endpoint is
        compared against the prefix of C with the endpoint's length.
        """
        c = compact(code)
        lo = compact(self.start)
        hi = compact(self.end)
        return c[: len(lo)] >= lo and c[: len(hi)] <= hi

    def __str__(self) -> str:
        return self.start if self.start == self.end else f"{self.start}-{self.end}"


def extract_code_refs(text: str) -> list[CodeRange]:
    """
    Extract code and range references from instructional note text.

    Handles ``(I10-I16)``, ``(R03.0-)``, ``(O10-O11, O13-O16)`` and bare codes.
    """
    refs: list[CodeRange] = []
    for match in _REF_PATTERN.finditer(text):
        first, _dash, second = match.groups()
        try:
            if second:
                refs.append(CodeRange(normalize_code(first), normalize_code(second)))
            else:
                code = normalize_code(first)
                refs.append(CodeRange(code, code))
        except InvalidCodeError:
            continue
    return refs


def strip_extension(code: str) -> str | None:
    """
    Return the base of a seven-character code, dropping the extension and X placeholders.

    Returns None if the code has no seventh character.
    """
    c = compact(code)
    if len(c) != 7:
        return None
    base = c[:6].rstrip("X")
    if len(base) < 3:
        return None
    return normalize_code(base)

"""Exception hierarchy for ragcoder."""

from typing import Any


class RagCoderError(Exception):
    """Base class for all ragcoder errors."""


class ConfigError(RagCoderError):
    """Invalid or missing configuration."""


class InvalidCodeError(RagCoderError, ValueError):
    """A string that is not a syntactically valid ICD-10-CM code."""

    def __init__(self, raw: str) -> None:
        self.raw = raw
        super().__init__(f"Invalid ICD-10-CM code: {raw!r}")


class TabularParseError(RagCoderError):
    """The tabular-list XML is not well formed."""

    def __init__(self, message: str, offset: int) -> None:
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class TabularStructureError(RagCoderError):
    """A well-formed tabular list with a structurally invalid element."""

    def __init__(self, message: str, chapter: str) -> None:
        self.chapter = chapter
        super().__init__(f"{message} in chapter {chapter!r}")


class GuidelineTocError(RagCoderError):
    """The guidelines document has no usable table of contents."""


class BackendError(RagCoderError):
    """Base class for LLM / embedding backend failures."""


class TransientBackendError(BackendError):
    """Network, timeout or server-side failure; safe to retry."""


class BackendConfigError(BackendError):
    """Client-side (4xx) failure; retrying will not help."""

    def __init__(self, message: str, status_code: int | None = None) -> None:
        self.status_code = status_code
        super().__init__(message)


class ContractError(BackendError):
    """The backend response violated the declared output contract."""

    def __init__(self, message: str, raw_text: str) -> None:
        self.raw_text = raw_text
        super().__init__(message)


class MockScriptExhausted(BackendError, AssertionError):
    """A mock backend was called more times than its script allows."""


class SummaryError(RagCoderError):
    """Guideline summarisation failed after retries."""

    def __init__(self, message: str, code: str, summarised_sections: list[str]) -> None:
        self.code = code
        self.summarised_sections = summarised_sections
        super().__init__(message)


class IndexBuildError(RagCoderError):
    """The few-shot index could not be built."""

    def __init__(self, message: str, failed_ids: list[str] | None = None) -> None:
        self.failed_ids = failed_ids or []
        super().__init__(message)


class DatasetError(RagCoderError):
    """Fatal dataset problem (unreadable file, duplicate note ids)."""


class DatasetValidationError(DatasetError):
    """One or more dataset lines failed validation."""

    def __init__(self, errors: list[dict[str, Any]]) -> None:
        self.errors = errors
        lines = ", ".join(str(e["line"]) for e in errors[:10])
        super().__init__(f"{len(errors)} invalid dataset line(s): {lines}")


class EvaluationError(RagCoderError):
    """Inputs that cannot be scored (orphan predictions, undefined alpha)."""

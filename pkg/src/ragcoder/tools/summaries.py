"""get_relevant_summaries_for_code tool, resolved before the step-4 call."""

import logging
from collections.abc import Mapping
from typing import TypedDict

from ..codes import normalize_code
from ..errors import InvalidCodeError
from ..guidelines import GuidelineSummary

logger = logging.getLogger(__name__)

TOOL_NAME = "get_relevant_summaries_for_code"


class SummaryToolResult(TypedDict, total=False):
    success: bool
    code: str
    found: bool
    bullets: list[str]
    source_sections: list[str]
    error: str


class GuidelineSummaryTool:
    """Serves step-3 summaries to the guideline auditor."""

    name = TOOL_NAME

    def __init__(
        self,
        summaries: Mapping[str, GuidelineSummary],
        failures: Mapping[str, str] | None = None,
    ) -> None:
        self.summaries = summaries
        self.failures = failures or {}

    async def execute(self, code: str) -> SummaryToolResult:
        """
        Look up the guideline summary for a code.

        A code without a summary, or whose summarisation failed, reports
        found = False; the auditor then retains it.
        """
        try:
            code = normalize_code(code)
        except InvalidCodeError as e:
            return {"success": False, "code": code, "found": False, "bullets": [], "source_sections": [], "error": str(e)}

        if code in self.failures:
            return {
                "success": False,
                "code": code,
                "found": False,
                "bullets": [],
                "source_sections": [],
                "error": self.failures[code],
            }

        summary = self.summaries.get(code)
        if summary is None:
            logger.info("No guideline summary for %s", code)
            return {"success": True, "code": code, "found": False, "bullets": [], "source_sections": []}

        return {
            "success": True,
            "code": code,
            "found": summary.found,
            "bullets": list(summary.bullets),
            "source_sections": list(summary.source_sections),
        }

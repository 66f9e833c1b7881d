"""Tools exposed to the guideline-audit agent."""

from .summaries import GuidelineSummaryTool, SummaryToolResult

__all__ = ["GuidelineSummaryTool", "SummaryToolResult"]

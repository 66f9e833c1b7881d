"""Shared fixtures for the ragcoder tests."""

from collections.abc import Callable
from pathlib import Path

import pytest

from ragcoder.client import MockBackend
from ragcoder.config import BackendConfig, MockRule
from ragcoder.gateway import LLMGateway, UsageLedger
from ragcoder.guidelines import GuidelineStore, build_toc
from ragcoder.knowledge_graph import CodeGraph, parse_tabular_list
from ragcoder.models import ClinicalNote
from ragcoder.summary_cache import SummaryCache

FIXTURES = Path(__file__).parent / "fixtures"
TABULAR = FIXTURES / "tabular_mini.xml"
GUIDELINES = FIXTURES / "guidelines_mini.txt"

GatewayFactory = Callable[..., LLMGateway]


async def no_sleep(_: float) -> None:
    return None


@pytest.fixture(scope="session")
def graph() -> CodeGraph:
    """Knowledge graph of the miniature tabular list."""
    return parse_tabular_list(TABULAR)


@pytest.fixture
def store(tmp_path: Path) -> GuidelineStore:
    """Guideline store over the miniature guidelines with an empty cache."""
    data = GUIDELINES.read_bytes()
    return GuidelineStore(data, build_toc(data), "2022", cache=SummaryCache(tmp_path / "cache"))


@pytest.fixture
def note() -> ClinicalNote:
    return ClinicalNote(
        note_id="n1",
        encounter_id="e1",
        note_type="discharge summary",
        text=(
            "Patient with long-standing hypertension and stage 3 chronic kidney disease. "
            "Blood pressure 162/95 on admission. Smokes 1 pack per day."
        ),
    )


@pytest.fixture
def make_gateway() -> GatewayFactory:
    """Factory for gateways over a scripted mock backend that never sleeps."""

    def factory(
        script: list[str | MockRule],
        ledger: UsageLedger | None = None,
        **config: object,
    ) -> LLMGateway:
        backend_config = BackendConfig(kind="mock", model="mock", **config)  # type: ignore[arg-type]
        return LLMGateway(MockBackend(script), backend_config, ledger, sleep=no_sleep)

    return factory

"""Four-agent coding pipeline with stage gating and closed-book self-correction."""

import asyncio
import logging
from collections.abc import Mapping, Sequence
from typing import NamedTuple

from .audit import AuditLogger
from .codes import normalize_code
from .config import FewShotConfig, PipelineConfig
from .errors import BackendError, ConfigError, InvalidCodeError, SummaryError
from .fewshot import Embedder, FewShotIndex, IndexedExample
from .gateway import (
    FinalAnswerContract,
    GenerationContract,
    LLMGateway,
    SelectedCode,
    SelectionContract,
    UsageLedger,
)
from .guidelines import GuidelineStore, GuidelineSummary
from .knowledge_graph import CodeGraph, conflicts, extract_subgraph, serialize_triplets
from .models import CandidateCode, ClinicalNote, CodingResult, Step, final_codes
from .prompts import (
    generator_messages,
    guideline_auditor_messages,
    kg_auditor_messages,
    self_correct_messages,
)
from .tools.summaries import GuidelineSummaryTool

logger = logging.getLogger(__name__)

NOT_SELECTED = "Not selected by the {agent}"
RETAINED_BY_DEFAULT = "No applicable guidelines found; retained by default"


class PipelineDependencies:
    """Read-only resources shared by all notes of a run."""

    def __init__(
        self,
        gateways: Mapping[str, LLMGateway],
        graph: CodeGraph | None = None,
        store: GuidelineStore | None = None,
        index: FewShotIndex | None = None,
        embedder: Embedder | None = None,
        audit: AuditLogger | None = None,
        fewshot: FewShotConfig | None = None,
    ) -> None:
        self.gateways = dict(gateways)
        self.graph = graph
        self.store = store
        self.index = index
        self.embedder = embedder
        self.audit = audit
        self.fewshot = fewshot or FewShotConfig()

    def gateway(self, role: str) -> LLMGateway:
        try:
            return self.gateways[role]
        except KeyError:
            raise ConfigError(f"No gateway for agent {role!r}") from None

    def describe(self, code: str) -> str:
        if self.graph is None:
            return ""
        resolved = self.graph.resolve(code)
        return (self.graph.description(resolved[0]) or "") if resolved else ""


def check_dependencies(config: PipelineConfig, deps: PipelineDependencies) -> None:
    """
    Verify every enabled stage has what it needs.

    Raises:
        ConfigError: On a missing dependency
    """
    roles = ["generator"]
    if config.self_correction_rounds:
        roles.append("self_corrector")
    if 2 in config.stages:
        roles.append("kg_auditor")
        if deps.graph is None:
            raise ConfigError("Stage 2 needs a knowledge graph")
    if 3 in config.stages:
        roles.append("summariser")
        if deps.store is None:
            raise ConfigError("Stage 3 needs a guideline store")
    if 4 in config.stages:
        roles.append("guideline_auditor")
    for role in roles:
        deps.gateway(role)
    if deps.fewshot.k > 0 and deps.index is not None and deps.embedder is None:
        raise ConfigError("Few-shot retrieval needs an embedder")


def _copy(candidates: Sequence[CandidateCode]) -> list[CandidateCode]:
    return [c.model_copy(deep=True) for c in candidates]


def _known(graph: CodeGraph | None, code: str | None) -> bool:
    """True when no graph is loaded or the graph resolves the code."""
    return code is not None and (graph is None or graph.resolve(code) is not None)


def _selected_codes(results: Sequence[SelectedCode], step: str) -> dict[str, str]:
    """Normalized code -> justification, skipping invalid codes."""
    selected: dict[str, str] = {}
    for item in results:
        raw, justification = item.code, item.justification
        try:
            code = normalize_code(raw)
        except InvalidCodeError:
            logger.warning("Step %s returned invalid code %r; ignored", step, raw)
            continue
        selected.setdefault(code, justification)
    return selected


async def step1_generate(
    note: ClinicalNote,
    examples: Sequence[IndexedExample],
    gateway: LLMGateway,
    *,
    descriptions: Mapping[str, str] | None = None,
    max_example_chars: int = 4000,
    ledger: UsageLedger | None = None,
) -> list[CandidateCode]:
    """
    Generate candidate codes with verbatim evidence.

    Duplicate codes merge with their evidence unioned. Evidence that is not a
    verbatim substring of the note is kept apart as unverified.
    """
    messages = generator_messages(note, examples, descriptions, max_example_chars)
    reply = await gateway.complete(messages, GenerationContract(), step="1", ledger=ledger)

    merged: dict[str, CandidateCode] = {}
    for item in reply.results:
        try:
            code = normalize_code(item.code)
        except InvalidCodeError:
            logger.warning("Note %s: generator returned invalid code %r; ignored", note.note_id, item.code)
            continue
        candidate = merged.get(code)
        if candidate is None:
            candidate = merged[code] = CandidateCode(code=code, description=item.description)
        elif not candidate.description:
            candidate.description = item.description
        for span in item.evidence:
            span = span.strip()
            if not span or span in candidate.evidence or span in candidate.unverified_evidence:
                continue
            if span in note.text:
                candidate.evidence.append(span)
            else:
                logger.warning("Note %s: evidence for %s is not verbatim: %r", note.note_id, code, span)
                candidate.unverified_evidence.append(span)

    return [c.mark("1", "generated") for c in merged.values()]


async def step2_kg_audit(
    note: ClinicalNote,
    candidates: Sequence[CandidateCode],
    graph: CodeGraph,
    gateway: LLMGateway,
    *,
    allow_additions: bool = True,
    ledger: UsageLedger | None = None,
) -> list[CandidateCode]:
    """Validate candidates against their knowledge-graph subgraph."""
    result = _copy(candidates)
    active = [c for c in result if c.active]
    if not active:
        return result

    codes = [c.code for c in active]
    subgraph = extract_subgraph(graph, codes)
    for candidate in active:
        candidate.unverifiable = candidate.code in subgraph.absent

    messages = kg_auditor_messages(note, codes, serialize_triplets(subgraph), subgraph.absent)
    reply = await gateway.complete(messages, SelectionContract(), step="2", ledger=ledger)
    selected = _selected_codes(reply.results, "2")

    for candidate in active:
        if candidate.code in selected:
            candidate.mark("2", "retained", selected[candidate.code])
        else:
            candidate.mark("2", "removed", NOT_SELECTED.format(agent="knowledge-graph auditor"))

    by_code = {c.code: c for c in result}
    for code, justification in selected.items():
        if code in codes:
            continue
        resolved = graph.resolve(code)
        if resolved is None:
            logger.warning("Note %s: step 2 added %s, absent from the tabular list; rejected", note.note_id, code)
            continue
        if not allow_additions:
            logger.info("Note %s: step 2 addition %s ignored (additions disabled)", note.note_id, code)
            continue
        existing = by_code.get(code)
        if existing is not None:
            existing.mark("2", "added", justification)
        else:
            description = graph.description(resolved[0]) or ""
            added = CandidateCode(code=code, description=description).mark("2", "added", justification)
            result.append(added)
            by_code[code] = added
    return result


class SummaryResult(NamedTuple):
    summaries: dict[str, GuidelineSummary]
    failures: dict[str, str]


async def step3_summarise(
    codes: Sequence[str],
    store: GuidelineStore,
    gateway: LLMGateway,
    *,
    descriptions: Mapping[str, str] | None = None,
    ledger: UsageLedger | None = None,
) -> SummaryResult:
    """
    Summarise guidelines for each unique code, cache first.

    A failure for one code yields a not-found marker for it and is reported in
    the failures map; the other codes are still summarised.
    """
    summaries: dict[str, GuidelineSummary] = {}
    failures: dict[str, str] = {}
    for code in dict.fromkeys(normalize_code(c) for c in codes):
        description = (descriptions or {}).get(code)
        try:
            summaries[code] = await store.summarise(code, gateway, description=description, ledger=ledger)
        except (SummaryError, BackendError) as e:
            logger.error("Guideline summary for %s failed: %s", code, e)
            failures[code] = str(e)
            summaries[code] = GuidelineSummary(
                code=code,
                status="not_found",
                version=store.version,
                backend_fingerprint=gateway.fingerprint,
            )
    return SummaryResult(summaries, failures)


async def step4_guideline_audit(
    note: ClinicalNote,
    candidates: Sequence[CandidateCode],
    summaries: Mapping[str, GuidelineSummary],
    gateway: LLMGateway,
    *,
    failures: Mapping[str, str] | None = None,
    graph: CodeGraph | None = None,
    allow_additions: bool = True,
    ledger: UsageLedger | None = None,
) -> list[CandidateCode]:
    """
    Retain, remove or replace each candidate using its guideline summary.

    Candidates without applicable guidelines are retained whatever the backend says.
    """
    result = _copy(candidates)
    active = [c for c in result if c.active]
    if not active:
        return result

    tool = GuidelineSummaryTool(summaries, failures)
    tool_results = [await tool.execute(c.code) for c in active]
    protected = {r["code"] for r in tool_results if not r["found"]}
    if all(c.code in protected for c in active):
        for candidate in active:
            candidate.mark("4", "retained", RETAINED_BY_DEFAULT)
        return result

    messages = guideline_auditor_messages(note, active, tool_results)
    reply = await gateway.complete(messages, FinalAnswerContract(), step="4", ledger=ledger)

    final: list[str] = []
    for raw in reply.final_codes:
        try:
            code = normalize_code(raw)
        except InvalidCodeError:
            logger.warning("Note %s: final answer contains invalid code %r; ignored", note.note_id, raw)
            continue
        if code not in final:
            final.append(code)

    thoughts: dict[str, str] = {}
    replacements: dict[str, str] = {}
    for decision in reply.decisions:
        try:
            code = normalize_code(decision.code)
        except InvalidCodeError:
            continue
        thoughts[code] = decision.thought
        if decision.action == "replace" and decision.replacement:
            try:
                replacements[code] = normalize_code(decision.replacement)
            except InvalidCodeError:
                continue

    active_codes = {c.code for c in active}
    replaced_by: dict[str, str] = {}
    for candidate in active:
        code = candidate.code
        if code in protected:
            candidate.mark("4", "retained", RETAINED_BY_DEFAULT)
        elif code in final:
            candidate.mark("4", "retained", thoughts.get(code, ""))
        elif (target := replacements.get(code)) in final and target not in active_codes and _known(graph, target):
            candidate.mark("4", "replaced-by", thoughts.get(code) or f"Replaced by {target}", related_code=target)
            replaced_by.setdefault(target, code)
        else:
            candidate.mark("4", "removed", thoughts.get(code) or NOT_SELECTED.format(agent="guideline auditor"))

    by_code = {c.code: c for c in result}
    for code in final:
        if code in active_codes:
            continue
        origin = replaced_by.get(code)
        if origin is None:
            if not allow_additions:
                logger.info("Note %s: step 4 addition %s ignored (additions disabled)", note.note_id, code)
                continue
            if not _known(graph, code):
                logger.warning("Note %s: step 4 added %s, absent from the tabular list; rejected", note.note_id, code)
                continue
        action = "added" if origin is None else "replacement-target"
        justification = f"Replaces {origin}" if origin else "Added by the guideline auditor"
        existing = by_code.get(code)
        if existing is None:
            description = ""
            if graph is not None and (resolved := graph.resolve(code)) is not None:
                description = graph.description(resolved[0]) or ""
            existing = CandidateCode(code=code, description=description)
            result.append(existing)
            by_code[code] = existing
        existing.mark("4", action, justification, related_code=origin)
    return result


async def self_correct(
    note: ClinicalNote,
    candidates: Sequence[CandidateCode],
    gateway: LLMGateway,
    rounds: int,
    *,
    graph: CodeGraph | None = None,
    allow_additions: bool = True,
    ledger: UsageLedger | None = None,
) -> list[CandidateCode]:
    """Closed-book review rounds: the prompt carries only the note and the codes."""
    if rounds < 1:
        raise ValueError("self-correction needs at least one round")
    result = _copy(candidates)
    step: Step = "SC"
    for round_number in range(1, rounds + 1):
        active = [c for c in result if c.active]
        if not active:
            break
        reply = await gateway.complete(self_correct_messages(note, active), SelectionContract(), step="sc", ledger=ledger)
        selected = _selected_codes(reply.results, "sc")
        for candidate in active:
            if candidate.code in selected:
                candidate.mark(step, "retained", selected[candidate.code])
            else:
                candidate.mark(step, "removed", NOT_SELECTED.format(agent=f"self-correction round {round_number}"))
        by_code = {c.code: c for c in result}
        for code, justification in selected.items():
            if code in {c.code for c in active} or not allow_additions:
                continue
            if not _known(graph, code):
                logger.warning("Note %s: self-correction added %s, absent from the tabular list; rejected", note.note_id, code)
                continue
            existing = by_code.get(code)
            if existing is None:
                existing = CandidateCode(code=code)
                result.append(existing)
            existing.mark(step, "added", justification)
    return result


async def run(note: ClinicalNote, config: PipelineConfig, deps: PipelineDependencies) -> CodingResult:
    """
    Code one note. Never raises: a stage failure yields a result with status "failed".
    """
    ledger = UsageLedger()
    audit = deps.audit
    candidates: list[CandidateCode] = []
    snapshots: dict[str, list[str]] = {}
    summary_failures: dict[str, str] = {}
    found_conflicts: list[dict[str, str]] = []
    step = "setup"

    def finish(stage: str) -> None:
        snapshots[stage] = final_codes(candidates)
        if audit is not None:
            audit.log_stage(note.note_id, stage, {"codes": snapshots[stage]})

    try:
        check_dependencies(config, deps)
        step = "1"
        examples: list[IndexedExample] = []
        if deps.index is not None and deps.embedder is not None and deps.fewshot.k > 0:
            examples = await deps.index.retrieve(note, deps.fewshot.k, deps.embedder)
        descriptions = {code: deps.describe(code) for e in examples for code in e.gold_codes}
        candidates = await step1_generate(
            note,
            examples,
            deps.gateway("generator"),
            descriptions=descriptions,
            max_example_chars=deps.fewshot.max_example_chars,
            ledger=ledger,
        )
        finish("1")

        if not candidates:
            logger.info("Note %s: no candidates from step 1; skipping later stages", note.note_id)
        elif config.self_correction_rounds:
            step = "SC"
            candidates = await self_correct(
                note,
                candidates,
                deps.gateway("self_corrector"),
                config.self_correction_rounds,
                graph=deps.graph,
                allow_additions=config.allow_additions,
                ledger=ledger,
            )
            finish("SC")
        else:
            if 2 in config.stages and deps.graph is not None:
                step = "2"
                candidates = await step2_kg_audit(
                    note,
                    candidates,
                    deps.graph,
                    deps.gateway("kg_auditor"),
                    allow_additions=config.allow_additions,
                    ledger=ledger,
                )
                found_conflicts = [
                    {"code": c.code, "other": c.other, "kind": c.kind.value}
                    for c in conflicts(deps.graph, final_codes(candidates))
                ]
                if found_conflicts and audit is not None:
                    audit.log("conflicts", note_id=note.note_id, step="2", status="warning", detail={"conflicts": found_conflicts})
                finish("2")

            if 3 in config.stages and deps.store is not None:
                step = "3"
                active = final_codes(candidates)
                summaries, summary_failures = await step3_summarise(
                    active,
                    deps.store,
                    deps.gateway("summariser"),
                    descriptions={c.code: c.description for c in candidates if c.description},
                    ledger=ledger,
                )
                for code, message in summary_failures.items():
                    if audit is not None:
                        audit.log_error("summary", message, note_id=note.note_id, step="3", detail={"code": code})
                finish("3")

                if 4 in config.stages:
                    step = "4"
                    candidates = await step4_guideline_audit(
                        note,
                        candidates,
                        summaries,
                        deps.gateway("guideline_auditor"),
                        failures=summary_failures,
                        graph=deps.graph,
                        allow_additions=config.allow_additions,
                        ledger=ledger,
                    )
                    finish("4")
    except Exception as e:
        logger.error("Note %s failed at step %s: %s", note.note_id, step, e)
        if audit is not None:
            audit.log_error("note", str(e), note_id=note.note_id, step=step, detail={"error_type": type(e).__name__})
        return CodingResult(
            note_id=note.note_id,
            encounter_id=note.encounter_id,
            status="failed",
            error=str(e),
            failed_step=step,
            candidates=candidates,
            snapshots=snapshots,
            summary_failures=summary_failures,
            usage=ledger.to_dict(),
        )

    return CodingResult(
        note_id=note.note_id,
        encounter_id=note.encounter_id,
        codes=final_codes(candidates),
        candidates=candidates,
        snapshots=snapshots,
        summary_failures=summary_failures,
        conflicts=found_conflicts,
        usage=ledger.to_dict(),
    )


async def run_batch(
    notes: Sequence[ClinicalNote],
    config: PipelineConfig,
    deps: PipelineDependencies,
) -> list[CodingResult]:
    """Code notes concurrently up to config.workers; results keep input order."""
    semaphore = asyncio.Semaphore(config.workers)

    async def worker(note: ClinicalNote) -> CodingResult:
        async with semaphore:
            return await run(note, config, deps)

    results = await asyncio.gather(*(worker(n) for n in notes))
    failed = sum(r.status == "failed" for r in results)
    logger.info("Coded %d note(s), %d failed", len(results), failed)
    return list(results)

"""Tests for the coding pipeline stages and the per-note runner."""

import asyncio
import json
from pathlib import Path
from typing import Any

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragcoder.audit import AuditLogger
from ragcoder.client import MockBackend
from ragcoder.config import BackendConfig, FewShotConfig, MockRule, PipelineConfig
from ragcoder.fewshot import HashingEmbedder, build_index
from ragcoder.gateway import FinalAnswerContract, LLMGateway
from ragcoder.guidelines import GuidelineStore, GuidelineSummary
from ragcoder.knowledge_graph import CodeGraph
from ragcoder.models import CandidateCode, ClinicalNote, final_codes
from ragcoder.pipeline import (
    RETAINED_BY_DEFAULT,
    PipelineDependencies,
    run,
    run_batch,
    self_correct,
    step1_generate,
    step2_kg_audit,
    step3_summarise,
    step4_guideline_audit,
)

from .conftest import GatewayFactory, no_sleep

FOUND = '{"status": "found", "bullets": ["Assign I12.- when hypertension and chronic kidney disease coexist."]}'
NOT_FOUND = '{"status": "not_found", "bullets": []}'
GENERATED = json.dumps(
    {
        "results": [
            {"code": "I10", "description": "Essential (primary) hypertension", "evidence": ["hypertension"]},
            {"code": "N18.9", "evidence": ["chronic kidney disease"]},
        ]
    }
)
KEEP_BOTH = '{"results": [{"code": "I10", "justification": "documented"}, {"code": "N18.9", "justification": "documented"}]}'
KEEP_I10 = '{"results": [{"code": "I10", "justification": "documented"}]}'
AUDIT_KEEP_BOTH = """Code: I10
Thought: Hypertension is documented.
Decision: retain

Code: N18.9
Thought: Chronic kidney disease is documented.
Decision: retain

Final Answer: I10, N18.9"""
AUDIT_REPLACE = """Code: I10
Thought: Chronic kidney disease is documented, so hypertension is coded with the combination code.
Decision: replace with I12.9

Code: N18.9
Thought: No guidelines found.
Decision: retain

Final Answer: I12.9, N18.9"""


def _generated(*codes: str) -> list[CandidateCode]:
    return [CandidateCode(code=c).mark("1", "generated") for c in codes]


def _summary(code: str, found: bool = True) -> GuidelineSummary:
    return GuidelineSummary(
        code=code,
        status="found" if found else "not_found",
        bullets=[f"Rule for {code}"] if found else [],
        source_sections=["I.C.9.a"] if found else [],
        version="2022",
        backend_fingerprint="mock:mock",
    )


def _prompts(gateway: LLMGateway) -> list[str]:
    backend = gateway.backend
    assert isinstance(backend, MockBackend)
    return backend.prompts


KEEPING = {"generated", "retained", "added", "replacement-target"}
DROPPING = {"removed", "replaced-by"}


def _replay(trails: list[dict[str, Any]]) -> list[str]:
    """Walk each trail from its first entry and keep the codes whose last decision keeps them."""
    kept = set()
    for record in trails:
        alive = False
        for entry in record["trail"]:
            assert entry["action"] in KEEPING | DROPPING
            alive = entry["action"] in KEEPING
        if alive:
            kept.add(record["code"])
    return sorted(kept)


def _deps(
    make_gateway: GatewayFactory,
    graph: CodeGraph | None = None,
    store: GuidelineStore | None = None,
    **scripts: list[str | MockRule],
) -> PipelineDependencies:
    roles = ("generator", "kg_auditor", "summariser", "guideline_auditor", "self_corrector")
    gateways = {role: make_gateway(scripts.get(role, [])) for role in roles}
    return PipelineDependencies(gateways, graph=graph, store=store, fewshot=FewShotConfig(k=0))


# Step 1


@pytest.mark.asyncio
async def test_step1_merges_and_verifies_evidence(note: ClinicalNote, make_gateway: GatewayFactory) -> None:
    """Test duplicate codes merge and non-verbatim evidence is kept apart."""
    reply = {
        "results": [
            {"code": "F17.20", "description": "Nicotine dependence, unspecified", "evidence": ["Smokes 1 pack per day"]},
            {"code": "f1720", "evidence": ["1 pack per day", "Smokes 1 pack per day"]},
            {"code": "I10", "evidence": ["hypertension", "HTN"]},
            {"code": "12.9X", "evidence": ["hypertension"]},
        ]
    }
    gateway = make_gateway([json.dumps(reply)])
    candidates = await step1_generate(note, [], gateway)

    assert [c.code for c in candidates] == ["F17.20", "I10"]
    nicotine, hypertension = candidates
    assert nicotine.description == "Nicotine dependence, unspecified"
    assert nicotine.evidence == ["Smokes 1 pack per day", "1 pack per day"]
    assert hypertension.evidence == ["hypertension"]
    assert hypertension.unverified_evidence == ["HTN"]
    assert [(t.step, t.action) for t in nicotine.trail] == [("1", "generated")]
    assert "Smokes 1 pack per day" in _prompts(gateway)[0]


@pytest.mark.asyncio
async def test_step1_empty_reply(note: ClinicalNote, make_gateway: GatewayFactory) -> None:
    """Test an empty result list gives no candidates."""
    gateway = make_gateway(['{"results": []}'])
    assert await step1_generate(note, [], gateway) == []


@pytest.mark.asyncio
async def test_step1_renders_examples(note: ClinicalNote, make_gateway: GatewayFactory) -> None:
    """Test retrieved examples and their code descriptions reach the prompt."""
    embedder = HashingEmbedder(dimension=32)
    training = [ClinicalNote(note_id="t1", encounter_id="te1", text="Known hypertension.", gold_codes=["I10"])]
    index = await build_index(training, embedder)
    gateway = make_gateway([GENERATED])
    await step1_generate(note, index.examples, gateway, descriptions={"I10": "Essential (primary) hypertension"})
    prompt = _prompts(gateway)[0]
    assert "Example 1" in prompt
    assert "Known hypertension." in prompt
    assert "- I10: Essential (primary) hypertension" in prompt


# Step 2


@pytest.mark.asyncio
async def test_step2_retains_and_removes(note: ClinicalNote, graph: CodeGraph, make_gateway: GatewayFactory) -> None:
    """Test unselected candidates are removed with a justification."""
    gateway = make_gateway(['{"results": [{"code": "I10", "justification": "Hypertension is documented"}]}'])
    candidates = _generated("I10", "R03.0")
    result = await step2_kg_audit(note, candidates, graph, gateway)

    by_code = {c.code: c for c in result}
    assert by_code["I10"].trail[-1].action == "retained"
    assert by_code["I10"].trail[-1].justification == "Hypertension is documented"
    assert by_code["R03.0"].trail[-1].action == "removed"
    assert by_code["R03.0"].trail[-1].justification == "Not selected by the knowledge-graph auditor"
    assert final_codes(result) == ["I10"]
    assert [len(c.trail) for c in candidates] == [1, 1]

    prompt = _prompts(gateway)[0]
    assert "<KnowledgeGraph>" in prompt
    assert "[I10, ancestor, I10-I16]" in prompt
    assert "<Codes>I10, R03.0</Codes>" in prompt


@pytest.mark.asyncio
async def test_step2_additions_are_graph_gated(note: ClinicalNote, graph: CodeGraph, make_gateway: GatewayFactory) -> None:
    """Test additions must resolve in the tabular list and can be disabled."""
    reply = json.dumps(
        {
            "results": [
                {"code": "I10", "justification": "documented"},
                {"code": "N18.9", "justification": "use additional code for the CKD stage"},
                {"code": "Q99.9", "justification": "invented"},
            ]
        }
    )
    result = await step2_kg_audit(note, _generated("I10"), graph, make_gateway([reply]))
    assert final_codes(result) == ["I10", "N18.9"]
    added = next(c for c in result if c.code == "N18.9")
    assert [(t.step, t.action) for t in added.trail] == [("2", "added")]
    assert added.description == graph.description("N18.9")

    disabled = await step2_kg_audit(note, _generated("I10"), graph, make_gateway([reply]), allow_additions=False)
    assert final_codes(disabled) == ["I10"]


@pytest.mark.asyncio
async def test_step2_marks_unverifiable(note: ClinicalNote, graph: CodeGraph, make_gateway: GatewayFactory) -> None:
    """Test candidates absent from the graph are flagged and labelled in the prompt."""
    gateway = make_gateway(['{"results": [{"code": "I10"}, {"code": "I99.9"}]}'])
    result = await step2_kg_audit(note, _generated("I10", "I99.9"), graph, gateway)
    by_code = {c.code: c for c in result}
    assert by_code["I99.9"].unverifiable is True
    assert by_code["I10"].unverifiable is False
    assert "I99.9 (UNVERIFIED)" in _prompts(gateway)[0]


@pytest.mark.asyncio
async def test_step2_without_active_candidates(note: ClinicalNote, graph: CodeGraph, make_gateway: GatewayFactory) -> None:
    """Test nothing to audit makes no backend call."""
    gateway = make_gateway([])
    removed = [c.mark("2", "removed") for c in _generated("I10")]
    assert final_codes(await step2_kg_audit(note, removed, graph, gateway)) == []
    assert await step2_kg_audit(note, [], graph, gateway) == []
    assert _prompts(gateway) == []


# Step 3


@pytest.mark.asyncio
async def test_step3_summarises_unique_codes(store: GuidelineStore, make_gateway: GatewayFactory) -> None:
    """Test one summary per unique code and cache hits on the second run."""
    gateway = make_gateway([FOUND, NOT_FOUND])
    summaries, failures = await step3_summarise(["I10", "i10", "R03.0"], store, gateway)
    assert list(summaries) == ["I10", "R03.0"]
    assert summaries["I10"].found
    assert not summaries["R03.0"].found
    assert failures == {}

    again = await step3_summarise(["R03.0", "I10"], store, gateway)
    assert again.summaries["I10"] == summaries["I10"]
    assert len(_prompts(gateway)) == 2


@pytest.mark.asyncio
async def test_step3_isolates_failures(store: GuidelineStore, make_gateway: GatewayFactory) -> None:
    """Test a failed code becomes not-found while the others are summarised."""
    gateway = make_gateway(["garbage", "still garbage", FOUND])
    summaries, failures = await step3_summarise(["I10", "R03.0"], store, gateway)
    assert list(failures) == ["I10"]
    assert summaries["I10"].status == "not_found"
    assert summaries["R03.0"].found


# Step 4


@pytest.mark.asyncio
async def test_step4_replaces_and_protects(note: ClinicalNote, graph: CodeGraph, make_gateway: GatewayFactory) -> None:
    """Test replacement links both codes and codes without guidelines are retained."""
    gateway = make_gateway([AUDIT_REPLACE.replace("Final Answer: I12.9, N18.9", "Final Answer: I12.9")])
    summaries = {"I10": _summary("I10"), "N18.9": _summary("N18.9", found=False)}
    result = await step4_guideline_audit(note, _generated("I10", "N18.9"), summaries, gateway, graph=graph)

    by_code = {c.code: c for c in result}
    old = by_code["I10"].trail[-1]
    assert (old.step, old.action, old.related_code) == ("4", "replaced-by", "I12.9")
    assert old.justification.startswith("Chronic kidney disease is documented")
    new = by_code["I12.9"].trail[-1]
    assert (new.action, new.related_code, new.justification) == ("replacement-target", "I10", "Replaces I10")
    assert by_code["I12.9"].description == graph.description("I12.9")
    kept = by_code["N18.9"].trail[-1]
    assert (kept.action, kept.justification) == ("retained", RETAINED_BY_DEFAULT)
    assert final_codes(result) == ["I12.9", "N18.9"]

    prompt = _prompts(gateway)[0]
    assert "get_relevant_summaries_for_code(I10) [sections I.C.9.a]" in prompt
    assert "get_relevant_summaries_for_code(N18.9): no guidelines found" in prompt


@pytest.mark.asyncio
async def test_step4_removes_and_adds(note: ClinicalNote, graph: CodeGraph, make_gateway: GatewayFactory) -> None:
    """Test removal keeps the thought and additions are gated."""
    reply = """Code: I10
Thought: Hypertension is documented.
Decision: retain

Code: R03.0
Thought: Hypertension is diagnosed, so the elevated reading is not coded separately.
Decision: remove

Final Answer: I10, E11.9, E11.65"""
    summaries = {"I10": _summary("I10"), "R03.0": _summary("R03.0")}

    result = await step4_guideline_audit(note, _generated("I10", "R03.0"), summaries, make_gateway([reply]), graph=graph)
    by_code = {c.code: c for c in result}
    assert by_code["I10"].trail[-1].justification == "Hypertension is documented."
    assert by_code["R03.0"].trail[-1].action == "removed"
    assert by_code["R03.0"].trail[-1].justification.startswith("Hypertension is diagnosed")
    assert by_code["E11.9"].trail[-1].action == "added"
    assert final_codes(result) == ["E11.9", "I10"]

    disabled = await step4_guideline_audit(
        note, _generated("I10", "R03.0"), summaries, make_gateway([reply]), graph=graph, allow_additions=False
    )
    assert final_codes(disabled) == ["I10"]


@pytest.mark.asyncio
async def test_step4_all_without_guidelines(note: ClinicalNote, make_gateway: GatewayFactory) -> None:
    """Test an adversarial backend is never consulted when no guidelines apply."""
    gateway = make_gateway(["Final Answer: None"])
    summaries = {"I10": _summary("I10", found=False)}
    result = await step4_guideline_audit(
        note, _generated("I10", "R03.0"), summaries, gateway, failures={"R03.0": "backend down"}
    )
    assert final_codes(result) == ["I10", "R03.0"]
    assert all(c.trail[-1].justification == RETAINED_BY_DEFAULT for c in result)
    assert _prompts(gateway) == []


@pytest.mark.asyncio
async def test_step4_adversarial_removal_of_unguided_code(note: ClinicalNote, make_gateway: GatewayFactory) -> None:
    """Test a code without guidelines survives even when the final answer omits it."""
    gateway = make_gateway(["Final Answer: I10"])
    summaries = {"I10": _summary("I10"), "N18.9": _summary("N18.9", found=False)}
    result = await step4_guideline_audit(note, _generated("I10", "N18.9"), summaries, gateway)
    assert final_codes(result) == ["I10", "N18.9"]


@pytest.mark.asyncio
async def test_step4_empty(note: ClinicalNote, make_gateway: GatewayFactory) -> None:
    """Test no candidates gives no call."""
    gateway = make_gateway([])
    assert await step4_guideline_audit(note, [], {}, gateway) == []
    assert _prompts(gateway) == []


IN_GRAPH = ["I10", "I12.9", "N18.9", "E11.9", "R03.0", "F17.210", "Z72.0"]
NOT_IN_GRAPH = ["E11.65", "J45.909"]


@st.composite
def guideline_audits(draw: st.DrawFn) -> tuple[list[str], dict[str, bool], str]:
    """Candidates, whether guidelines were found for each, and an arbitrary auditor reply."""
    candidates = draw(st.lists(st.sampled_from([*IN_GRAPH, "J45.909"]), min_size=1, max_size=4, unique=True))
    found = {code: draw(st.booleans()) for code in candidates}
    decisions = st.one_of(
        st.none(),
        st.sampled_from(["retain", "remove", "Keep, do not replace"]),
        st.sampled_from(IN_GRAPH + NOT_IN_GRAPH).map(lambda target: f"replace with {target}"),
    )
    blocks = []
    for code in candidates:
        decision = draw(decisions)
        if decision is not None:
            blocks.append(f"Code: {code}\nThought: reviewed\nDecision: {decision}\n")
    answer = draw(st.lists(st.sampled_from(IN_GRAPH + NOT_IN_GRAPH), max_size=5, unique=True))
    reply = "\n".join(blocks) + f"\nFinal Answer: {', '.join(answer) or 'None'}"
    return candidates, found, reply


@settings(max_examples=150, deadline=None)
@given(guideline_audits())
def test_step4_keeps_unguided_codes_and_trails_explain_result(
    graph: CodeGraph, audit: tuple[list[str], dict[str, bool], str]
) -> None:
    """Test codes without guidelines survive any reply and replaying the trails gives the final codes."""
    codes, found, reply = audit
    note = ClinicalNote(note_id="n1", encounter_id="e1", text="Hypertension and chronic kidney disease.")
    summaries = {code: _summary(code, found=found[code]) for code in codes}
    gateway = LLMGateway(MockBackend([reply]), BackendConfig(kind="mock", model="mock"), sleep=no_sleep)

    result = asyncio.run(step4_guideline_audit(note, _generated(*codes), summaries, gateway, graph=graph))

    unguided = {code for code in codes if not found[code]}
    answer = set(FinalAnswerContract().parse(reply).final_codes)
    if unguided == set(codes):
        expected = set(codes)
    else:
        expected = unguided | {code for code in answer if code in codes or code in IN_GRAPH}
    assert unguided <= set(final_codes(result))
    trails = [{"code": c.code, "trail": [t.model_dump() for t in c.trail]} for c in result]
    assert _replay(trails) == sorted(expected)
    for candidate in result:
        for entry in candidate.trail:
            if entry.action == "replaced-by":
                assert entry.related_code in expected


# Self-correction


@pytest.mark.asyncio
async def test_self_correct_rounds(note: ClinicalNote, make_gateway: GatewayFactory) -> None:
    """Test stable rounds keep the codes and a removal shrinks the next prompt."""
    gateway = make_gateway([KEEP_BOTH, KEEP_BOTH])
    result = await self_correct(note, _generated("I10", "N18.9"), gateway, rounds=2)
    assert final_codes(result) == ["I10", "N18.9"]
    assert [(t.step, t.action) for t in result[0].trail] == [("1", "generated"), ("SC", "retained"), ("SC", "retained")]

    gateway = make_gateway([KEEP_I10, KEEP_I10])
    result = await self_correct(note, _generated("I10", "N18.9"), gateway, rounds=2)
    assert final_codes(result) == ["I10"]
    prompts = _prompts(gateway)
    assert "N18.9" in prompts[0]
    assert "N18.9" not in prompts[1]
    for prompt in prompts:
        assert "<KnowledgeGraph>" not in prompt
        assert "<Guidelines>" not in prompt


@pytest.mark.asyncio
async def test_self_correct_needs_a_round(note: ClinicalNote, make_gateway: GatewayFactory) -> None:
    """Test zero rounds is refused."""
    with pytest.raises(ValueError):
        await self_correct(note, _generated("I10"), make_gateway([]), rounds=0)


# Runner


@pytest.mark.asyncio
async def test_run_step1_only(note: ClinicalNote, make_gateway: GatewayFactory) -> None:
    """Test stages [1] returns the generator's codes without other calls."""
    deps = _deps(make_gateway, generator=[GENERATED])
    result = await run(note, PipelineConfig(stages=[1]), deps)
    assert result.status == "ok"
    assert result.codes == ["I10", "N18.9"]
    assert list(result.snapshots) == ["1"]
    assert list(result.usage["steps"]) == ["1"]
    assert _prompts(deps.gateway("kg_auditor")) == []


@pytest.mark.asyncio
async def test_run_stages_1_2(note: ClinicalNote, graph: CodeGraph, make_gateway: GatewayFactory) -> None:
    """Test stages [1, 2] applies the knowledge-graph audit."""
    deps = _deps(make_gateway, graph, generator=[GENERATED], kg_auditor=[KEEP_I10])
    result = await run(note, PipelineConfig(stages=[1, 2]), deps)
    assert result.codes == ["I10"]
    assert result.snapshots == {"1": ["I10", "N18.9"], "2": ["I10"]}


@pytest.mark.asyncio
async def test_run_full_pipeline_all_retained(
    note: ClinicalNote, graph: CodeGraph, store: GuidelineStore, make_gateway: GatewayFactory
) -> None:
    """Test a pipeline where every agent keeps everything returns the step-1 codes."""
    deps = _deps(
        make_gateway,
        graph,
        store,
        generator=[GENERATED],
        kg_auditor=[KEEP_BOTH],
        summariser=[FOUND, FOUND],
        guideline_auditor=[AUDIT_KEEP_BOTH],
    )
    result = await run(note, PipelineConfig(), deps)
    assert result.status == "ok"
    assert result.codes == result.snapshots["1"] == ["I10", "N18.9"]
    assert list(result.snapshots) == ["1", "2", "3", "4"]
    assert list(result.usage["steps"]) == ["1", "2", "3", "4"]
    assert result.usage["total"]["calls"] == 5


@pytest.mark.asyncio
async def test_run_stage_gating_is_a_prefix(
    note: ClinicalNote, graph: CodeGraph, store: GuidelineStore, make_gateway: GatewayFactory
) -> None:
    """Test a gated run equals the matching snapshot of a full run."""
    scripts: dict[str, list[str | MockRule]] = {
        "generator": [MockRule(pattern="<Note>", response=GENERATED)],
        "kg_auditor": [MockRule(pattern="<KnowledgeGraph>", response=KEEP_BOTH)],
        "summariser": [MockRule(pattern="<Guidelines>", response=FOUND)],
        "guideline_auditor": [MockRule(pattern="get_relevant_summaries_for_code", response=AUDIT_REPLACE)],
    }
    full = await run(note, PipelineConfig(), _deps(make_gateway, graph, store, **scripts))
    gated = await run(note, PipelineConfig(stages=[1, 2]), _deps(make_gateway, graph, store, **scripts))
    assert gated.codes == full.snapshots["2"]
    assert gated.snapshots["1"] == full.snapshots["1"]
    assert full.codes == ["I12.9", "N18.9"]


@pytest.mark.asyncio
async def test_run_trails_reconstruct_codes(
    note: ClinicalNote, graph: CodeGraph, store: GuidelineStore, make_gateway: GatewayFactory
) -> None:
    """Test each code's trail starts with its origin and explains the final list."""
    deps = _deps(
        make_gateway,
        graph,
        store,
        generator=[GENERATED],
        kg_auditor=[KEEP_BOTH],
        summariser=[FOUND, FOUND],
        guideline_auditor=[AUDIT_REPLACE],
    )
    result = await run(note, PipelineConfig(), deps)
    order = ["1", "2", "3", "4", "SC"]
    for candidate in result.candidates:
        steps = [order.index(t.step) for t in candidate.trail]
        assert steps == sorted(steps)
        assert candidate.trail[0].action in ("generated", "added", "replacement-target")
    prediction = result.to_prediction()
    assert _replay(prediction["trails"]) == prediction["codes"] == ["I12.9", "N18.9"]
    trails = {t["code"]: t["trail"] for t in prediction["trails"]}
    assert trails["I10"][-1] == {
        "step": "4",
        "action": "replaced-by",
        "justification": "Chronic kidney disease is documented, so hypertension is coded with the combination code.",
        "related_code": "I12.9",
    }
    assert "related_code" not in trails["N18.9"][0]


@pytest.mark.asyncio
async def test_run_summary_failure_retains_code(
    note: ClinicalNote, graph: CodeGraph, store: GuidelineStore, make_gateway: GatewayFactory
) -> None:
    """Test a summary failure is recorded and its code survives step 4."""
    deps = _deps(
        make_gateway,
        graph,
        store,
        generator=[GENERATED],
        kg_auditor=[KEEP_BOTH],
        summariser=["garbage", "still garbage", FOUND],
        guideline_auditor=["Code: N18.9\nThought: documented\nDecision: retain\nFinal Answer: N18.9"],
    )
    result = await run(note, PipelineConfig(), deps)
    assert result.status == "ok"
    assert list(result.summary_failures) == ["I10"]
    assert result.codes == ["I10", "N18.9"]
    i10 = next(c for c in result.candidates if c.code == "I10")
    assert i10.trail[-1].justification == RETAINED_BY_DEFAULT


@pytest.mark.asyncio
async def test_run_records_failure(note: ClinicalNote, graph: CodeGraph, make_gateway: GatewayFactory) -> None:
    """Test a stage failure yields a failed record instead of raising."""
    deps = _deps(make_gateway, graph, generator=[GENERATED], kg_auditor=["garbage", "more garbage"])
    result = await run(note, PipelineConfig(stages=[1, 2]), deps)
    assert result.status == "failed"
    assert result.failed_step == "2"
    assert result.codes == []
    assert result.snapshots == {"1": ["I10", "N18.9"]}
    assert "contract" in (result.error or "")

    prediction = result.to_prediction()
    assert prediction["status"] == "failed"
    assert prediction["failed_step"] == "2"


@pytest.mark.asyncio
async def test_run_missing_dependency(note: ClinicalNote, make_gateway: GatewayFactory) -> None:
    """Test enabling a stage without its resource fails before any call."""
    deps = _deps(make_gateway, generator=[GENERATED])
    result = await run(note, PipelineConfig(stages=[1, 2]), deps)
    assert result.status == "failed"
    assert result.failed_step == "setup"
    assert "knowledge graph" in (result.error or "")
    assert _prompts(deps.gateway("generator")) == []


@pytest.mark.asyncio
async def test_run_with_self_correction(note: ClinicalNote, make_gateway: GatewayFactory) -> None:
    """Test self-correction runs after step 1 and is snapshotted."""
    deps = _deps(make_gateway, generator=[GENERATED], self_corrector=[KEEP_I10, KEEP_I10])
    result = await run(note, PipelineConfig(stages=[1], self_correction_rounds=2), deps)
    assert result.codes == ["I10"]
    assert result.snapshots == {"1": ["I10", "N18.9"], "SC": ["I10"]}
    assert result.usage["steps"]["sc"]["calls"] == 2


@pytest.mark.asyncio
async def test_run_uses_fewshot_examples(note: ClinicalNote, graph: CodeGraph, make_gateway: GatewayFactory) -> None:
    """Test retrieved examples reach the generator with graph descriptions."""
    embedder = HashingEmbedder(dimension=32)
    training = [ClinicalNote(note_id="t1", encounter_id="te1", text="Known hypertension.", gold_codes=["I10"])]
    deps = _deps(make_gateway, graph, generator=[GENERATED])
    deps.index = await build_index(training, embedder)
    deps.embedder = embedder
    deps.fewshot = FewShotConfig(k=1)
    await run(note, PipelineConfig(stages=[1]), deps)
    prompt = _prompts(deps.gateway("generator"))[0]
    assert "Known hypertension." in prompt
    assert f"- I10: {graph.description('I10')}" in prompt


@pytest.mark.asyncio
async def test_run_audit_log(note: ClinicalNote, graph: CodeGraph, make_gateway: GatewayFactory, tmp_path: Path) -> None:
    """Test stages and excludes1 conflicts are written to the audit log."""
    path = tmp_path / "audit.jsonl"
    keep = '{"results": [{"code": "I10"}, {"code": "R03.0"}]}'
    generated = '{"results": [{"code": "I10", "evidence": ["hypertension"]}, {"code": "R03.0", "evidence": ["162/95"]}]}'
    deps = _deps(make_gateway, graph, generator=[generated], kg_auditor=[keep])
    deps.audit = AuditLogger(path, "run-1")

    result = await run(note, PipelineConfig(stages=[1, 2]), deps)
    assert result.conflicts == [{"code": "R03.0", "other": "I10", "kind": "excludes1"}]

    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert [(r["action"], r["step"]) for r in records] == [("stage", "1"), ("conflicts", "2"), ("stage", "2")]
    assert all(r["run_id"] == "run-1" and r["note_id"] == "n1" for r in records)
    assert records[2]["detail"] == {"codes": ["I10", "R03.0"]}


@pytest.mark.asyncio
async def test_run_batch_keeps_input_order(make_gateway: GatewayFactory) -> None:
    """Test concurrent coding returns results in input order."""
    words = ["alpha", "beta", "gamma", "delta"]
    codes = ["I10", "E11.9", "R03.0", "Z72.0"]
    rules: list[str | MockRule] = [
        MockRule(pattern=f"patient {w}", response=f'{{"results": [{{"code": "{c}"}}]}}')
        for w, c in zip(words, codes, strict=True)
    ]
    notes = [ClinicalNote(note_id=f"n{i}", encounter_id="e1", text=f"Note about patient {w}.") for i, w in enumerate(words)]
    deps = _deps(make_gateway, generator=rules)
    results = await run_batch(notes, PipelineConfig(stages=[1], workers=3), deps)
    assert [r.note_id for r in results] == ["n0", "n1", "n2", "n3"]
    assert [r.codes for r in results] == [[c] for c in codes]

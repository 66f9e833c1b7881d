"""Agent prompts and message builders."""

from collections.abc import Mapping, Sequence
from typing import TYPE_CHECKING

from .gateway import AgentMessage

if TYPE_CHECKING:
    from .fewshot import IndexedExample
    from .guidelines import GuidelineSection
    from .models import CandidateCode, ClinicalNote
    from .tools.summaries import SummaryToolResult

GENERATOR_SYSTEM = """You are an experienced clinical coder.

Assign every ICD-10-CM code that the medical note supports.
Back each code with one or more evidence snippets copied verbatim from the note; do not paraphrase or reword them.
Code only what is explicitly documented. When a note says a patient "smokes 1 pack per day", the tobacco product is not stated, so F17.20 (nicotine dependence, unspecified) applies rather than F17.210 (nicotine dependence, cigarettes).

Respond with JSON only, in exactly this shape:
{"results": [{"code": "<ICD-10-CM code>", "description": "<official code description>", "evidence": ["<verbatim snippet>", "..."]}]}"""

KG_AUDITOR_SYSTEM = """You are an experienced clinical coder.

From the candidate codes, keep the ones the patient's note supports, drop the ones it does not, and add any code that must accompany a kept code.
Base every decision on the knowledge graph supplied with the note.

Input:
<Note>...</Note> holds the medical note.
<Codes>...</Codes> holds the candidate codes, comma separated.
<KnowledgeGraph>...</KnowledgeGraph> holds one triplet per line.

Each triplet reads [subject, predicate, object]. The subject is a code or a range such as I10-I16. Predicates:
  description: the official title of the code
  inclusion_term: synonyms and terms covered by the code
  includes: conditions the category covers
  excludes1: codes that are never reported together with the subject
  use_additional_code: companion codes that must also be reported
  code_first: the underlying condition to report first
  ancestor: the parent code or range
Candidates marked UNVERIFIED were not found in the tabular list.

Respond with JSON only, in exactly this shape:
{"results": [{"code": "<ICD-10-CM code>", "justification": "<short reason for keeping or adding the code>"}]}
List only the codes that should be assigned."""

SUMMARISER_SYSTEM = """You are an experienced clinical coder reading the official ICD-10-CM coding guidelines.

Extract only the rules that govern whether and how the given code may be assigned. Ignore rules for other codes unless they forbid, require or replace the given code.
Each bullet must be a self-contained rule.

Respond with JSON only:
{"status": "found", "bullets": ["<rule>", "..."]}
or, when the text holds no rule that applies to the code:
{"status": "not_found", "bullets": []}"""

GUIDELINE_AUDITOR_SYSTEM = """You are an experienced clinical coder.

Audit the codes assigned to the medical note against the official coding guidelines. Do not use abbreviations.

Guideline summaries for every code were fetched with get_relevant_summaries_for_code() and appear below the note.
For each code write:
Code: <the code>
Thought: <if guidelines were found, reason whether to retain, remove or replace it; if none were found, retain the code and move on>
Decision: <retain | remove | replace with <new code>>

Finish with the refined code list on one line, in exactly this form:
Final Answer: Code1, Code2, Code3"""

SELF_CORRECT_SYSTEM = """You are an experienced clinical coder reviewing codes assigned to a medical note.

Using only your own coding knowledge, check each code against the note. Keep the codes that are correct, drop the ones the note does not support and add any code that is clearly missing.

Respond with JSON only, in exactly this shape:
{"results": [{"code": "<ICD-10-CM code>", "justification": "<short reason>"}]}
List only the codes that should be assigned."""

REPAIR_TEMPLATE = """Your previous reply could not be parsed: {problem}
Reply again following the required output format exactly, with nothing else."""


def render_examples(examples: Sequence["IndexedExample"], descriptions: Mapping[str, str], max_chars: int) -> str:
    blocks = []
    for number, example in enumerate(examples, start=1):
        text = example.text if len(example.text) <= max_chars else example.text[:max_chars] + " [...]"
        codes = "\n".join(
            f"- {code}: {descriptions.get(code, '')}".rstrip(": ") for code in example.gold_codes
        )
        blocks.append(f"Example {number}\n<Note>\n{text}\n</Note>\nCodes:\n{codes}")
    return "\n\n".join(blocks)


def generator_messages(
    note: "ClinicalNote",
    examples: Sequence["IndexedExample"] = (),
    descriptions: Mapping[str, str] | None = None,
    max_example_chars: int = 4000,
) -> list[AgentMessage]:
    messages = [AgentMessage(role="system", content=GENERATOR_SYSTEM)]
    if examples:
        rendered = render_examples(examples, descriptions or {}, max_example_chars)
        messages.append(AgentMessage(role="user", content=f"Coded examples of similar notes:\n\n{rendered}"))
    messages.append(AgentMessage(role="user", content=f"<Note>\n{note.text}\n</Note>"))
    return messages


def kg_auditor_messages(
    note: "ClinicalNote",
    codes: Sequence[str],
    triplets: str,
    unverified: Sequence[str] = (),
) -> list[AgentMessage]:
    listed = ", ".join(f"{c} (UNVERIFIED)" if c in unverified else c for c in codes)
    body = (
        f"<Note>\n{note.text}\n</Note>\n"
        f"<Codes>{listed}</Codes>\n"
        f"<KnowledgeGraph>\n{triplets}\n</KnowledgeGraph>"
    )
    return [
        AgentMessage(role="system", content=KG_AUDITOR_SYSTEM),
        AgentMessage(role="user", content=body),
    ]


def summariser_messages(
    code: str,
    description: str | None,
    sections: Sequence["GuidelineSection"],
) -> list[AgentMessage]:
    label = f"{code} ({description})" if description else code
    text = "\n\n".join(f"=== {s.section_id} {s.title} ===\n{s.text.strip()}" for s in sections)
    return [
        AgentMessage(role="system", content=SUMMARISER_SYSTEM),
        AgentMessage(role="user", content=f"Code: {label}\n\n<Guidelines>\n{text}\n</Guidelines>"),
    ]


def render_tool_result(result: "SummaryToolResult") -> str:
    if not result["success"]:
        return f"get_relevant_summaries_for_code({result['code']}): error: {result['error']}"
    if not result["found"]:
        return f"get_relevant_summaries_for_code({result['code']}): no guidelines found"
    bullets = "\n".join(f"  - {b}" for b in result["bullets"])
    sources = ", ".join(result["source_sections"])
    return f"get_relevant_summaries_for_code({result['code']}) [sections {sources}]:\n{bullets}"


def guideline_auditor_messages(
    note: "ClinicalNote",
    candidates: Sequence["CandidateCode"],
    tool_results: Sequence["SummaryToolResult"],
) -> list[AgentMessage]:
    codes = ", ".join(c.code for c in candidates)
    guidance = "\n\n".join(render_tool_result(r) for r in tool_results)
    return [
        AgentMessage(role="system", content=GUIDELINE_AUDITOR_SYSTEM),
        AgentMessage(role="user", content=f"<Note>\n{note.text}\n</Note>\n<Codes>{codes}</Codes>"),
        AgentMessage(role="tool", content=guidance),
    ]


def self_correct_messages(note: "ClinicalNote", candidates: Sequence["CandidateCode"]) -> list[AgentMessage]:
    listed = "\n".join(
        f"- {c.code}: {c.description}" if c.description else f"- {c.code}" for c in candidates
    )
    return [
        AgentMessage(role="system", content=SELF_CORRECT_SYSTEM),
        AgentMessage(role="user", content=f"<Note>\n{note.text}\n</Note>\nAssigned codes:\n{listed}"),
    ]


def repair_message(problem: str) -> AgentMessage:
    return AgentMessage(role="user", content=REPAIR_TEMPLATE.format(problem=problem))

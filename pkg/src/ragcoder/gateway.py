"""LLM gateway: output contracts, retries with backoff, repair reprompts and the usage ledger."""

import asyncio
import json
import logging
import re
import threading
from collections.abc import Awaitable, Callable, Sequence
from typing import Any, Generic, Literal, Protocol, TypeVar

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .client import Backend, Completion
from .config import BackendConfig
from .errors import ContractError, TransientBackendError

logger = logging.getLogger(__name__)

STEP_LABELS = ("1", "2", "3", "4", "sc")

T = TypeVar("T", covariant=True)


class AgentMessage(BaseModel):
    role: Literal["system", "user", "assistant", "tool"]
    content: str

    @field_validator("content")
    @classmethod
    def content_not_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("message content must not be empty")
        return v

    def wire(self) -> dict[str, str]:
        # Tool output is inlined; the chat endpoint sees it as a user turn
        if self.role == "tool":
            return {"role": "user", "content": self.content}
        return {"role": self.role, "content": self.content}


class ContractViolation(ValueError):
    """A reply that does not match its contract; triggers the repair reprompt."""


# Reply shapes


class GeneratedCode(BaseModel):
    code: str
    description: str = ""
    evidence: list[str] = []

    @field_validator("evidence", mode="before")
    @classmethod
    def coerce_evidence(cls, v: Any) -> Any:
        if isinstance(v, str):
            return [v]
        return v or []


class GenerationReply(BaseModel):
    results: list[GeneratedCode]


class SelectedCode(BaseModel):
    code: str
    justification: str = ""


class SelectionReply(BaseModel):
    results: list[SelectedCode]


class SummaryReply(BaseModel):
    status: Literal["found", "not_found"]
    bullets: list[str] = []

    @model_validator(mode="after")
    def empty_found_is_not_found(self) -> "SummaryReply":
        self.bullets = [b.strip() for b in self.bullets if b and b.strip()]
        if not self.bullets:
            self.status = "not_found"
        return self

    @property
    def found(self) -> bool:
        return self.status == "found"


class AuditDecision(BaseModel):
    code: str
    action: Literal["retain", "remove", "replace"]
    replacement: str | None = None
    thought: str = ""


class AuditReply(BaseModel):
    final_codes: list[str]
    decisions: list[AuditDecision] = Field(default_factory=list)


# Contracts


class Contract(Protocol[T]):
    name: str

    def parse(self, text: str) -> T: ...


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)


def extract_json(text: str) -> Any:
    """Parse the JSON object embedded in a reply, tolerating code fences and chatter."""
    fenced = _FENCE.search(text)
    body = fenced.group(1) if fenced else text
    start, end = body.find("{"), body.rfind("}")
    if start < 0 or end <= start:
        raise ContractViolation("no JSON object found")
    try:
        return json.loads(body[start : end + 1])
    except json.JSONDecodeError as e:
        raise ContractViolation(f"invalid JSON: {e.msg} at position {e.pos}") from e


M = TypeVar("M", bound=BaseModel)


class JsonContract(Generic[M]):
    """A JSON reply validated against a pydantic model."""

    def __init__(self, name: str, model: type[M]) -> None:
        self.name = name
        self.model = model

    def parse(self, text: str) -> M:
        data = extract_json(text)
        try:
            return self.model.model_validate(data)
        except ValidationError as e:
            first = e.errors()[0]
            location = ".".join(str(p) for p in first["loc"]) or "(root)"
            raise ContractViolation(f"{location}: {first['msg']}") from e


def GenerationContract() -> JsonContract[GenerationReply]:
    return JsonContract("generation", GenerationReply)


def SelectionContract() -> JsonContract[SelectionReply]:
    return JsonContract("selection", SelectionReply)


def SummaryContract() -> JsonContract[SummaryReply]:
    return JsonContract("summary", SummaryReply)


_FINAL_ANSWER = re.compile(r"^\W*final\s+answer\W*:\s*(.*)$", re.IGNORECASE | re.MULTILINE)
_FIELD = re.compile(r"^\W*(code|thought|decision|guidelines)\W*:\s*(.*)$", re.IGNORECASE)
_REPLACE = re.compile(r"replace\w*\b.*?\b(?:with|by)\s+([A-Za-z][0-9][0-9A-Za-z](?:\.?[0-9A-Za-z]{1,4})?)", re.IGNORECASE)
_NO_CODES = {"", "none", "n/a", "no codes", "[]"}


def _parse_decision(code: str, thought: str, decision: str) -> AuditDecision | None:
    text = decision.strip().lstrip("*`-").strip().lower()
    if text.startswith(("remove", "delete", "drop")):
        return AuditDecision(code=code, action="remove", thought=thought)
    if text.startswith(("retain", "keep")):
        return AuditDecision(code=code, action="retain", thought=thought)
    replace = _REPLACE.search(decision)
    if replace:
        return AuditDecision(code=code, action="replace", replacement=replace.group(1), thought=thought)
    return None


class FinalAnswerContract:
    """
    Guideline-audit reply: Code/Thought/Decision blocks and a "Final Answer:" line.

    Only the final-answer line is mandatory; blocks that cannot be read are skipped.
    """

    name = "final_answer"

    def parse(self, text: str) -> AuditReply:
        matches = _FINAL_ANSWER.findall(text)
        if not matches:
            raise ContractViolation('missing "Final Answer:" line')
        answer = matches[-1].strip(" \t*`[]")
        codes = [] if answer.lower() in _NO_CODES else [c.strip(" .`*'\"[]") for c in answer.split(",")]
        codes = [c for c in codes if c]

        decisions: list[AuditDecision] = []
        block: dict[str, str] = {}
        for line in text.splitlines():
            match = _FIELD.match(line)
            if not match:
                continue
            key, value = match.group(1).lower(), match.group(2).strip()
            if key == "code":
                block = {"code": value.split()[0].strip(" .`*:") if value else ""}
            elif key in ("thought", "decision") and block.get("code"):
                block[key] = value
                if key == "decision":
                    parsed = _parse_decision(block["code"], block.get("thought", ""), value)
                    if parsed is not None:
                        decisions.append(parsed)
                    block = {}
        return AuditReply(final_codes=codes, decisions=decisions)


# Ledger


class StepUsage(BaseModel):
    prompt_tokens: int = 0
    completion_tokens: int = 0
    calls: int = 0
    cost: float = 0.0

    @property
    def tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


class UsageLedger:
    """Per-step token and cost counters; safe to share across concurrent workers."""

    def __init__(self) -> None:
        self._steps: dict[str, StepUsage] = {}
        self._lock = threading.Lock()

    def record(self, step: str, prompt_tokens: int, completion_tokens: int, config: BackendConfig) -> None:
        cost = prompt_tokens * config.prompt_price + completion_tokens * config.completion_price
        with self._lock:
            usage = self._steps.setdefault(step, StepUsage())
            usage.prompt_tokens += prompt_tokens
            usage.completion_tokens += completion_tokens
            usage.calls += 1
            usage.cost += cost

    def step(self, step: str) -> StepUsage:
        with self._lock:
            return self._steps.get(step, StepUsage()).model_copy()

    def steps(self) -> dict[str, StepUsage]:
        with self._lock:
            ordered = sorted(self._steps, key=lambda s: (STEP_LABELS.index(s) if s in STEP_LABELS else 99, s))
            return {s: self._steps[s].model_copy() for s in ordered}

    def total(self) -> StepUsage:
        total = StepUsage()
        for usage in self.steps().values():
            total.prompt_tokens += usage.prompt_tokens
            total.completion_tokens += usage.completion_tokens
            total.calls += usage.calls
            total.cost += usage.cost
        return total

    def to_dict(self) -> dict[str, Any]:
        return {
            "steps": {s: u.model_dump() for s, u in self.steps().items()},
            "total": self.total().model_dump(),
        }

    def render_table(self) -> str:
        """Aligned cost table: one row per step plus a total row."""
        header = f"{'Step':<8}{'Prompt':>12}{'Completion':>12}{'Calls':>8}{'Cost (USD)':>14}"
        lines = [header, "-" * len(header)]
        rows = [*self.steps().items(), ("Total", self.total())]
        for label, u in rows:
            lines.append(
                f"{label:<8}{u.prompt_tokens:>12}{u.completion_tokens:>12}{u.calls:>8}{u.cost:>14.4f}"
            )
        return "\n".join(lines)


# Gateway

Sleep = Callable[[float], Awaitable[None]]


class LLMGateway:
    """
    Contract-enforcing front for one backend.

    A logical call makes at most 1 + max_retries network attempts for the
    original prompt and its single repair reprompt combined, plus one.
    """

    def __init__(
        self,
        backend: Backend,
        config: BackendConfig,
        ledger: UsageLedger | None = None,
        sleep: Sleep = asyncio.sleep,
    ) -> None:
        self.backend = backend
        self.config = config
        self.ledger = ledger if ledger is not None else UsageLedger()
        self._sleep = sleep

    @property
    def fingerprint(self) -> str:
        return self.backend.fingerprint

    async def _attempt(
        self,
        wire: list[dict[str, str]],
        attempts: int,
        step: str,
        note_ledger: UsageLedger | None,
    ) -> tuple[Completion, int]:
        failures = 0
        while True:
            try:
                completion = await self.backend.chat(wire)
            except TransientBackendError as e:
                failures += 1
                if failures >= attempts:
                    raise
                delay = self.config.backoff_base * 2 ** (failures - 1)
                logger.warning("Step %s attempt %d failed (%s); retrying in %.1fs", step, failures, e, delay)
                await self._sleep(delay)
                continue
            self.ledger.record(step, completion.prompt_tokens, completion.completion_tokens, self.config)
            if note_ledger is not None:
                note_ledger.record(step, completion.prompt_tokens, completion.completion_tokens, self.config)
            return completion, attempts - failures - 1

    async def complete(
        self,
        messages: Sequence[AgentMessage],
        contract: Contract[T],
        step: str,
        ledger: UsageLedger | None = None,
    ) -> T:
        """
        Send messages and parse the reply against a contract.

        Args:
            messages: Conversation to send
            contract: Expected reply shape
            step: Ledger label ("1".."4" or "sc")
            ledger: Optional per-note ledger, recorded in addition to the gateway ledger

        Raises:
            TransientBackendError: Network failures persisted through every retry
            BackendConfigError: Non-retryable HTTP 4xx
            ContractError: The reply still violated the contract after one repair
        """
        if not messages:
            raise ValueError("messages must not be empty")
        wire = [m.wire() for m in messages]
        completion, remaining = await self._attempt(wire, 1 + self.config.max_retries, step, ledger)
        try:
            return contract.parse(completion.text)
        except ContractViolation as e:
            problem = str(e)
            logger.warning("Step %s reply violated the %s contract (%s); repairing", step, contract.name, problem)

        from .prompts import repair_message

        wire = [
            *wire,
            {"role": "assistant", "content": completion.text or "(empty)"},
            repair_message(problem).wire(),
        ]
        completion, _ = await self._attempt(wire, remaining + 1, step, ledger)
        try:
            return contract.parse(completion.text)
        except ContractViolation as e:
            raise ContractError(
                f"Step {step} reply violated the {contract.name} contract after repair: {e}",
                completion.text,
            ) from e

"""Chat-completion backends: OpenAI-compatible HTTP and a scripted mock."""

import logging
import math
from typing import Any, NamedTuple, Protocol

import httpx

from .config import BackendConfig, MockRule, get_settings
from .errors import BackendConfigError, MockScriptExhausted, TransientBackendError

logger = logging.getLogger(__name__)

# Characters per synthesized token in the mock backend
CHARS_PER_TOKEN = 4


class Completion(NamedTuple):
    text: str
    prompt_tokens: int
    completion_tokens: int


class Backend(Protocol):
    """One network attempt per call; retries belong to the gateway."""

    @property
    def fingerprint(self) -> str: ...

    async def chat(self, messages: list[dict[str, str]]) -> Completion: ...


class HttpBackend:
    """Client for an OpenAI-compatible /chat/completions endpoint."""

    def __init__(
        self,
        config: BackendConfig,
        api_key: str | None = None,
        transport: httpx.AsyncBaseTransport | None = None,
    ) -> None:
        """
        Initialize the backend.

        Args:
            config: Backend configuration
            api_key: Bearer token (default: RAGCODER_API_KEY)
            transport: Optional httpx transport, used by tests
        """
        self.config = config
        self.api_key = api_key if api_key is not None else get_settings().api_key
        self.transport = transport
        self.headers = {"Content-Type": "application/json"}
        if self.api_key:
            self.headers["Authorization"] = f"Bearer {self.api_key}"

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint

    def _payload(self, messages: list[dict[str, str]]) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        }
        if self.config.reasoning_effort:
            payload["reasoning_effort"] = self.config.reasoning_effort
        return payload

    async def chat(self, messages: list[dict[str, str]]) -> Completion:
        url = f"{self.config.endpoint}/chat/completions"
        async with httpx.AsyncClient(timeout=self.config.timeout, transport=self.transport) as client:
            try:
                response = await client.post(url, headers=self.headers, json=self._payload(messages))
            except httpx.TimeoutException as e:
                raise TransientBackendError(f"Request to {url} timed out") from e
            except httpx.TransportError as e:
                raise TransientBackendError(f"Cannot connect to {url}: {e}") from e

        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"{url} returned HTTP {response.status_code}")
        if response.status_code >= 400:
            try:
                detail = response.json().get("error", response.text)
            except ValueError:
                detail = response.text
            raise BackendConfigError(f"{url} returned HTTP {response.status_code}: {detail}", response.status_code)

        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise TransientBackendError(f"Malformed completion payload from {url}") from e
        usage = data.get("usage") or {}
        return Completion(text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))


def synth_tokens(text: str) -> int:
    return math.ceil(len(text) / CHARS_PER_TOKEN)


class MockBackend:
    """
    Deterministic backend replaying a script.

    Pattern rules answer any prompt containing their substring and can fire
    repeatedly. Plain entries are consumed in order; running out of them fails loudly.
    """

    def __init__(self, script: list[str | MockRule], model: str = "mock") -> None:
        self.rules = [s for s in script if isinstance(s, MockRule) and s.pattern]
        self.queue = [s if isinstance(s, str) else s.response for s in script if not (isinstance(s, MockRule) and s.pattern)]
        self.model = model
        self.calls: list[list[dict[str, str]]] = []
        self._position = 0

    @classmethod
    def from_config(cls, config: BackendConfig) -> "MockBackend":
        return cls(list(config.script), model=config.model)

    @property
    def fingerprint(self) -> str:
        return f"mock:{self.model}"

    @property
    def prompts(self) -> list[str]:
        """Recorded prompts, one concatenated string per call."""
        return ["\n".join(m["content"] for m in call) for call in self.calls]

    @property
    def remaining(self) -> int:
        return len(self.queue) - self._position

    async def chat(self, messages: list[dict[str, str]]) -> Completion:
        self.calls.append([dict(m) for m in messages])
        prompt = "\n".join(m["content"] for m in messages)
        for rule in self.rules:
            if rule.pattern and rule.pattern in prompt:
                return Completion(rule.response, synth_tokens(prompt), synth_tokens(rule.response))
        if self._position >= len(self.queue):
            raise MockScriptExhausted(f"Mock script exhausted after {len(self.calls) - 1} call(s)")
        text = self.queue[self._position]
        self._position += 1
        return Completion(text, synth_tokens(prompt), synth_tokens(text))


def create_backend(config: BackendConfig, api_key: str | None = None) -> Backend:
    if config.kind == "mock":
        return MockBackend.from_config(config)
    return HttpBackend(config, api_key=api_key)

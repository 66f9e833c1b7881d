"""Configuration management for ragcoder."""

import hashlib
import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .codes import CodeScope
from .errors import ConfigError

AGENT_ROLES = ("generator", "kg_auditor", "summariser", "guideline_auditor", "self_corrector")

STAGE_SETS = ({1}, {1, 2}, {1, 2, 3}, {1, 2, 3, 4})


class MockRule(BaseModel):
    """A canned mock response, optionally keyed on a prompt substring."""

    pattern: str | None = None
    response: str


class BackendConfig(BaseModel):
    """Chat-completion backend definition."""

    kind: Literal["http", "mock"] = "http"
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-4.1"
    temperature: float = Field(default=0.2, ge=0.0, le=2.0)
    max_retries: int = Field(default=3, ge=0)
    timeout: float = Field(default=120.0, gt=0)
    backoff_base: float = Field(default=1.0, ge=0)
    prompt_price: float = Field(default=0.0, ge=0)
    completion_price: float = Field(default=0.0, ge=0)
    reasoning_effort: str | None = None
    script: list[str | MockRule] = []

    @field_validator("endpoint")
    @classmethod
    def strip_endpoint(cls, v: str) -> str:
        return v.rstrip("/")

    @property
    def fingerprint(self) -> str:
        """Identifier of the model producing outputs through this backend."""
        return f"{self.kind}:{self.model}"


class EmbedderConfig(BaseModel):
    """Embedding backend for the few-shot index."""

    kind: Literal["http", "hashing"] = "hashing"
    endpoint: str = "https://api.openai.com/v1"
    model: str = "text-embedding-3-large"
    dimension: int = Field(default=256, gt=0)
    batch_size: int = Field(default=64, gt=0)
    timeout: float = Field(default=60.0, gt=0)


class PipelineConfig(BaseModel):
    """Stage gating and concurrency."""

    stages: list[int] = [1, 2, 3, 4]
    self_correction_rounds: int = Field(default=0, ge=0)
    allow_additions: bool = True
    workers: int = Field(default=4, ge=1)

    @field_validator("stages")
    @classmethod
    def validate_stages(cls, v: list[int]) -> list[int]:
        stages = set(v)
        if stages not in STAGE_SETS:
            raise ValueError(f"stages must be one of 1, 12, 123, 1234, got {sorted(stages)}")
        return sorted(stages)

    @model_validator(mode="after")
    def validate_self_correction(self) -> "PipelineConfig":
        if self.self_correction_rounds and self.stages != [1]:
            raise ValueError("self-correction runs only with stages = [1]")
        return self

    @property
    def stage_label(self) -> str:
        label = "".join(str(s) for s in self.stages)
        return f"{label}+sc" if self.self_correction_rounds else label


class FewShotConfig(BaseModel):
    """Dynamic few-shot retrieval for step 1."""

    k: int = Field(default=2, ge=0)
    index: str | None = None
    max_example_chars: int = Field(default=4000, gt=0)


class GuidelineConfig(BaseModel):
    """Guideline store location and summarisation settings."""

    store: str | None = None
    general_sections: list[str] = ["I.A", "I.B"]
    max_chars: int = Field(default=60_000, gt=0)
    cache_dir: str | None = None


class KnowledgeGraphConfig(BaseModel):
    path: str | None = None
    version: str | None = None


class EvaluationConfig(BaseModel):
    scope: CodeScope = "diagnosis"
    macro_universe: Literal["union", "gold"] = "union"


class RunConfig(BaseModel):
    """Run configuration shared by the pipeline, the gateway and the CLI."""

    backends: dict[str, BackendConfig] = {}
    agents: dict[str, str] = {}
    embedder: EmbedderConfig = EmbedderConfig()
    pipeline: PipelineConfig = PipelineConfig()
    fewshot: FewShotConfig = FewShotConfig()
    guidelines: GuidelineConfig = GuidelineConfig()
    knowledge_graph: KnowledgeGraphConfig = KnowledgeGraphConfig()
    evaluation: EvaluationConfig = EvaluationConfig()

    @field_validator("agents")
    @classmethod
    def validate_agents(cls, v: dict[str, str]) -> dict[str, str]:
        unknown = set(v) - set(AGENT_ROLES)
        if unknown:
            raise ValueError(f"unknown agent roles: {', '.join(sorted(unknown))}")
        return v

    @model_validator(mode="after")
    def validate_backend_refs(self) -> "RunConfig":
        for role, name in self.agents.items():
            if name not in self.backends:
                raise ValueError(f"agent {role!r} refers to undefined backend {name!r}")
        return self

    def backend_for(self, role: str) -> BackendConfig:
        """Backend assigned to an agent role; a single defined backend serves every role."""
        name = self.agents.get(role)
        if name is None:
            if len(self.backends) == 1:
                return next(iter(self.backends.values()))
            raise ConfigError(f"No backend configured for agent {role!r}")
        return self.backends[name]

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form of the configuration."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Settings(BaseSettings):
    """Environment settings; credentials only, everything else lives in the run config."""

    model_config = SettingsConfigDict(
        env_prefix="RAGCODER_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    api_key: str = ""
    embedding_api_key: str = ""
    config_file: str = "config/ragcoder.yaml"


def load_run_config(path: str | Path) -> RunConfig:
    """
    Load a run configuration from YAML.

    Raises:
        ConfigError: If the file is missing, unreadable or invalid
    """
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}")
    try:
        with open(config_path, encoding="utf-8") as f:
            data: Any = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot read config file {config_path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {config_path} must contain a mapping")
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config file {config_path}:\n{e}") from e


def parse_stages(text: str) -> tuple[list[int], bool]:
    """
    Parse a stage selector: "1", "12", "123", "1234" or "1+sc".

    Returns (stages, self_correction).
    """
    text = text.strip().lower()
    self_correction = text.endswith("+sc")
    digits = text.removesuffix("+sc")
    if not digits.isdigit() or {int(c) for c in digits} not in STAGE_SETS:
        raise ConfigError(f"Invalid --stages value {text!r}; expected 1, 12, 123, 1234 or 1+sc")
    stages = sorted({int(c) for c in digits})
    if self_correction and stages != [1]:
        raise ConfigError("Self-correction combines only with stage 1 (use 1+sc)")
    return stages, self_correction


# Global settings instance
_settings: Settings | None = None


def get_settings() -> Settings:
    """Get global settings instance."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings

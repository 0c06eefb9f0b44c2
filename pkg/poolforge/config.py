"""
Configuration for poolforge runs.

A run is described by one human-editable YAML file (RunConfig). Only secrets
come from the environment; a `.env` file in the working directory is loaded by
the CLI, so API keys never have to appear in the run config.
"""

from __future__ import annotations

import hashlib
import json
import os
from enum import Enum
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from poolforge.core import Manifest, Method, Strategy, default_manifest
from poolforge.errors import ConfigError

REGION_SEED = 20260523


class ProviderSecrets:
    """API keys for the remote backends."""

    def __init__(self):
        self.gemini_api_key = os.getenv("GEMINI_API_KEY")
        self.http_api_key = os.getenv("POOLFORGE_HTTP_API_KEY")


class BackendKind(str, Enum):
    MOCK = "mock"
    # each model uses the provider named in the manifest (http or gemini)
    HTTP = "http"


class PartitionPolicy(str, Enum):
    CONSECUTIVE = "consecutive"
    SHUFFLED = "shuffled"


class AnchorRule(str, Enum):
    MAX_MIN = "max_min"
    MAX_SUM = "max_sum"


class Commonness(str, Enum):
    COUNT = "count"
    SHARE = "share"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BackendConfig(_Section):
    kind: BackendKind = BackendKind.MOCK
    concurrency: int = Field(default=8, ge=1)
    max_attempts: int = Field(default=3, ge=1)
    backoff_seconds: float = Field(default=1.0, ge=0.0)
    planning_retries: int = Field(default=2, ge=0)
    lenient_planning: bool = False
    http_base_url: str = "https://api.openai.com/v1"
    timeout_seconds: float = Field(default=120.0, gt=0)


class EmbedderConfig(_Section):
    name: str = "mock:64"
    batch_size: int = Field(default=32, ge=1)


class SeedConfig(_Section):
    run: int = 0
    partition: int = 0
    rarefaction: int = 0
    bootstrap: int = 0


class RegionConfig(_Section):
    seed: int = REGION_SEED
    n_init: int = Field(default=20, ge=1)
    max_iter: int = Field(default=300, ge=1)
    tol: float = 1e-6


class AnalysisConfig(_Section):
    rarefaction_repeats: int = Field(default=200, ge=1)
    bootstrap_replicates: int = Field(default=1000, ge=100)
    commonness: Commonness = Commonness.COUNT
    allow_cross_provider: bool = False


class ScoreSource(_Section):
    scorer: str
    path: str


class RunConfig(_Section):
    models: list[str]
    prompts: list[str]
    methods: list[Method] = Field(default_factory=lambda: list(Method))
    strategies: list[Strategy] = Field(default_factory=lambda: list(Strategy))
    n: int = Field(default=150, ge=2)
    output_dir: str = "runs/default"
    manifest: str | None = None
    backend: BackendConfig = Field(default_factory=BackendConfig)
    embedder: EmbedderConfig = Field(default_factory=EmbedderConfig)
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    partition_policy: PartitionPolicy = PartitionPolicy.CONSECUTIVE
    anchor_rule: AnchorRule = AnchorRule.MAX_MIN
    regions: RegionConfig = Field(default_factory=RegionConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    # prompt_id -> external score file; slogans default to the lexical score
    scores: dict[str, ScoreSource] = Field(default_factory=dict)
    slogan_scorer: str = "slogan_lexical"

    @field_validator("models", "prompts")
    @classmethod
    def _not_empty(cls, value: list[str]) -> list[str]:
        if not value:
            raise ValueError("must list at least one id")
        return value

    def load_manifest(self) -> Manifest:
        return Manifest.load(self.manifest) if self.manifest else default_manifest()

    def _digest(self, data: dict[str, Any]) -> str:
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def settings_hash(self) -> str:
        """
        Hash of every setting that changes artifact contents.

        The grid selection, output directory and score sources are left out so
        a widened grid can resume against cells produced earlier.
        """
        return self._digest(
            self.model_dump(
                mode="json",
                exclude={"models", "prompts", "methods", "strategies", "output_dir", "scores"},
            )
        )

    def generation_hash(self, method: Method | None = None) -> str:
        """
        Hash of the settings that change generated text; keys generation resume.

        The embedder only counts for repr cells, whose anchors are chosen in
        its space. Without a method the hash covers the settings every cell shares.
        """
        data: dict[str, Any] = {
            "n": self.n,
            "manifest": self.manifest,
            "backend": self.backend.model_dump(mode="json", include={"kind", "lenient_planning"}),
            "seeds": self.seeds.model_dump(mode="json", include={"run", "partition"}),
            "partition_policy": self.partition_policy.value,
            "anchor_rule": self.anchor_rule.value,
        }
        if method == Method.REPR:
            data["anchor_embedder"] = self.embedder.name
        return self._digest(data)

    def score_hash(self) -> str:
        """Hash of the quality-score settings, score file contents included."""
        sources = {}
        for prompt_id, source in sorted(self.scores.items()):
            path = Path(source.path)
            content = hashlib.sha256(path.read_bytes()).hexdigest() if path.is_file() else None
            sources[prompt_id] = {"scorer": source.scorer, "path": source.path, "sha256": content}
        return self._digest(
            {
                "commonness": self.analysis.commonness.value,
                "slogan_scorer": self.slogan_scorer,
                "scores": sources,
            }
        )

    def with_overrides(self, seed: int | None = None, backend: str | None = None) -> "RunConfig":
        update: dict[str, Any] = {}
        if seed is not None:
            update["seeds"] = self.seeds.model_copy(update={"run": seed})
        if backend is not None:
            update["backend"] = self.backend.model_copy(update={"kind": BackendKind(backend)})
        return self.model_copy(update=update)


def check_ids(config: RunConfig, manifest: Manifest) -> list[str]:
    problems = [f"unknown model_id: {m}" for m in config.models if m not in manifest.models]
    problems += [f"unknown prompt_id: {p}" for p in config.prompts if p not in manifest.prompts]
    problems += [f"scores: unknown prompt_id: {p}" for p in config.scores if p not in manifest.prompts]
    return problems


def load_run_config(path: str | Path) -> RunConfig:
    """Read and validate a run config; every problem is reported at once."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file is not valid YAML: {e}") from e

    if data.get("prompts") == "all" or data.get("models") == "all":
        manifest = Manifest.load(data["manifest"]) if data.get("manifest") else default_manifest()
        if data.get("prompts") == "all":
            data["prompts"] = list(manifest.prompts)
        if data.get("models") == "all":
            data["models"] = list(manifest.models)

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        problems = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        raise ConfigError("Invalid run config:\n  " + "\n  ".join(problems)) from e

    problems = check_ids(config, config.load_manifest())
    if problems:
        raise ConfigError("Invalid run config:\n  " + "\n  ".join(problems))
    return config


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)

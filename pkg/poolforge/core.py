"""
Experiment data model shared by every other module.

A cell is one (model, prompt condition, method, strategy) coordinate. Each cell
produces a candidate pool of n outputs; two-stage methods also produce a seed
pool that the evaluated pool is conditioned on. Every generated text is kept as
an OutputRecord together with its slot index and the tokens the call used.

Slot indices are the identity of an output. Texts may collide and duplicates are
kept as they are.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping

import yaml

from poolforge.errors import ManifestError


class Family(str, Enum):
    STORIES = "stories"
    AUT = "aut"
    SLOGANS = "slogans"


class Method(str, Enum):
    INDEP = "indep"
    STRAT = "strat"
    REPR = "repr"
    SELF = "self"
    PEER1 = "peer1"
    PEER2 = "peer2"

    @property
    def two_stage(self) -> bool:
        return self in ANCHOR_COUNTS

    @property
    def anchor_count(self) -> int:
        """How many seed outputs a second-stage call is shown (0 if none)."""
        return ANCHOR_COUNTS.get(self, 0)


class Strategy(str, Enum):
    NEUTRAL = "neutral"
    DIVERGE = "diverge"


class Stage(str, Enum):
    SEED = "seed"
    EVALUATED = "evaluated"


class UsageSource(str, Enum):
    BACKEND_REPORTED = "backend_reported"
    PROXY_ESTIMATED = "proxy_estimated"


# self slot included for self/peer methods
ANCHOR_COUNTS = {
    Method.REPR: 3,
    Method.SELF: 1,
    Method.PEER1: 2,
    Method.PEER2: 3,
}

STRATA_COUNT = 5


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    source: UsageSource = UsageSource.BACKEND_REPORTED

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    @property
    def estimated(self) -> bool:
        return self.source == UsageSource.PROXY_ESTIMATED

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        # one estimated part makes the whole sum estimated
        source = (
            UsageSource.PROXY_ESTIMATED
            if self.estimated or other.estimated
            else UsageSource.BACKEND_REPORTED
        )
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            source,
        )

    @classmethod
    def sum(cls, usages: Iterable["TokenUsage"]) -> "TokenUsage":
        total = cls()
        for usage in usages:
            total = total + usage
        return total

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TokenUsage":
        return cls(
            prompt_tokens=int(data["prompt_tokens"]),
            completion_tokens=int(data["completion_tokens"]),
            source=UsageSource(data.get("source", UsageSource.BACKEND_REPORTED.value)),
        )


@dataclass(frozen=True, order=True)
class CellCoord:
    model_id: str
    prompt_id: str
    family: Family
    method: Method
    strategy: Strategy

    @property
    def key(self) -> str:
        return f"{self.model_id}/{self.prompt_id}/{self.method.value}/{self.strategy.value}"

    def baseline(self) -> "CellCoord":
        """The indep-neutral cell for the same model and prompt."""
        return replace(self, method=Method.INDEP, strategy=Strategy.NEUTRAL)

    def with_method(self, method: Method) -> "CellCoord":
        return replace(self, method=method)

    def with_strategy(self, strategy: Strategy) -> "CellCoord":
        return replace(self, strategy=strategy)

    @property
    def is_baseline(self) -> bool:
        return self.method == Method.INDEP and self.strategy == Strategy.NEUTRAL

    def to_dict(self) -> dict[str, str]:
        return {
            "model_id": self.model_id,
            "prompt_id": self.prompt_id,
            "family": self.family.value,
            "method": self.method.value,
            "strategy": self.strategy.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CellCoord":
        return cls(
            model_id=str(data["model_id"]),
            prompt_id=str(data["prompt_id"]),
            family=Family(data["family"]),
            method=Method(data["method"]),
            strategy=Strategy(data["strategy"]),
        )


def output_key(cell: CellCoord, stage: Stage, slot: int) -> str:
    return f"{cell.key}/{stage.value}/{slot}"


@dataclass(frozen=True)
class OutputRecord:
    cell: CellCoord
    stage: Stage
    slot: int
    text: str
    usage: TokenUsage
    stratum_id: int | None = None
    anchor_slots: tuple[int, ...] | None = None

    @property
    def key(self) -> str:
        return output_key(self.cell, self.stage, self.slot)

    def to_dict(self) -> dict[str, Any]:
        # the cell lives in the pool header, not on every line
        data: dict[str, Any] = {
            "stage": self.stage.value,
            "slot": self.slot,
            "text": self.text,
            "usage": self.usage.to_dict(),
        }
        if self.stratum_id is not None:
            data["stratum_id"] = self.stratum_id
        if self.anchor_slots is not None:
            data["anchor_slots"] = list(self.anchor_slots)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], cell: CellCoord) -> "OutputRecord":
        anchors = data.get("anchor_slots")
        return cls(
            cell=cell,
            stage=Stage(data["stage"]),
            slot=int(data["slot"]),
            text=data["text"],
            usage=TokenUsage.from_dict(data["usage"]),
            stratum_id=data.get("stratum_id"),
            anchor_slots=tuple(int(a) for a in anchors) if anchors is not None else None,
        )


@dataclass(frozen=True)
class Pool:
    cell: CellCoord
    stage: Stage
    records: tuple[OutputRecord, ...]

    @classmethod
    def from_records(
        cls, cell: CellCoord, stage: Stage, records: Iterable[OutputRecord]
    ) -> "Pool":
        """Assemble a pool ordered by slot, whatever order the records arrived in."""
        return cls(cell, stage, tuple(sorted(records, key=lambda r: r.slot)))

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def texts(self) -> list[str]:
        return [r.text for r in self.records]

    @property
    def keys(self) -> list[str]:
        return [r.key for r in self.records]

    @property
    def usage(self) -> TokenUsage:
        return TokenUsage.sum(r.usage for r in self.records)

    @property
    def insufficient_for_pairwise(self) -> bool:
        return self.n < 2

    def record(self, slot: int) -> OutputRecord:
        return self.records[slot]


@dataclass(frozen=True)
class Violation:
    slot: int | None
    message: str

    def __str__(self) -> str:
        where = f"slot {self.slot}" if self.slot is not None else "pool"
        return f"{where}: {self.message}"


def validate_pool(pool: Pool) -> list[Violation]:
    """Check every Pool/OutputRecord invariant; an empty list means well-formed."""
    violations: list[Violation] = []
    method = pool.cell.method
    n = pool.n

    if pool.stage == Stage.SEED and not method.two_stage:
        violations.append(Violation(None, f"seed stage is not used by method {method.value}"))

    seen: set[int] = set()
    for record in pool.records:
        slot = record.slot
        if slot in seen:
            violations.append(Violation(slot, "duplicate slot index"))
        seen.add(slot)
        if not 0 <= slot < n:
            violations.append(Violation(slot, f"slot outside 0..{n - 1}"))
        if record.cell != pool.cell:
            violations.append(Violation(slot, "record belongs to another cell"))
        if record.stage != pool.stage:
            violations.append(Violation(slot, "record stage differs from pool stage"))

        if method == Method.STRAT:
            if record.stratum_id is None:
                violations.append(Violation(slot, "stratum_id missing for strat record"))
            elif not 1 <= record.stratum_id <= STRATA_COUNT:
                violations.append(Violation(slot, f"stratum_id {record.stratum_id} outside 1..5"))
        elif record.stratum_id is not None:
            violations.append(Violation(slot, "stratum_id set outside strat"))

        wants_anchors = method.two_stage and pool.stage == Stage.EVALUATED
        anchors = record.anchor_slots
        if wants_anchors:
            if anchors is None:
                violations.append(Violation(slot, "anchor_slots missing"))
            else:
                if len(anchors) != method.anchor_count:
                    violations.append(
                        Violation(
                            slot,
                            f"{method.value} needs {method.anchor_count} anchor_slots, got {len(anchors)}",
                        )
                    )
                if len(set(anchors)) != len(anchors):
                    violations.append(Violation(slot, "repeated anchor slot"))
                if any(not 0 <= a < n for a in anchors):
                    violations.append(Violation(slot, "anchor slot outside the pool"))
                if method != Method.REPR and slot not in anchors:
                    violations.append(Violation(slot, "anchor_slots must include the own slot"))
        elif anchors is not None:
            violations.append(Violation(slot, "anchor_slots set where no anchors are shown"))

    missing = sorted(set(range(n)) - seen)
    for slot in missing:
        violations.append(Violation(slot, "slot index missing"))

    return violations


########################################
# MANIFEST
########################################


@dataclass(frozen=True)
class PromptCondition:
    prompt_id: str
    family: Family
    template: str
    vars: Mapping[str, str]


@dataclass(frozen=True)
class ModelEntry:
    model_id: str
    provider: str
    model_name: str


@dataclass(frozen=True)
class FamilySettings:
    regions: int
    max_output_tokens: int


class Manifest:
    """
    Models and prompt conditions, read from a user-editable YAML file.

    The packaged default lists the three reference models and the twelve
    prompt conditions (4 stories, 5 AUT objects, 3 slogans).
    """

    def __init__(
        self,
        models: Mapping[str, ModelEntry],
        families: Mapping[Family, FamilySettings],
        prompts: Mapping[str, PromptCondition],
    ):
        self.models = MappingProxyType(dict(models))
        self.families = MappingProxyType(dict(families))
        self.prompts = MappingProxyType(dict(prompts))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Manifest":
        try:
            models = {
                model_id: ModelEntry(model_id, entry["provider"], entry.get("model_name", model_id))
                for model_id, entry in (data.get("models") or {}).items()
            }
            families = {
                Family(name): FamilySettings(int(entry["regions"]), int(entry["max_output_tokens"]))
                for name, entry in data["families"].items()
            }
            prompts = {
                prompt_id: PromptCondition(
                    prompt_id,
                    Family(entry["family"]),
                    entry["template"],
                    MappingProxyType(dict(entry.get("vars") or {})),
                )
                for prompt_id, entry in data["prompts"].items()
            }
        except (KeyError, ValueError, TypeError) as e:
            raise ManifestError(f"Malformed manifest: {e}") from e
        return cls(models, families, prompts)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Manifest":
        if path is None:
            text = resources.files("poolforge").joinpath("assets", "manifest.yaml").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_dict(yaml.safe_load(text))

    def prompt(self, prompt_id: str) -> PromptCondition:
        try:
            return self.prompts[prompt_id]
        except KeyError:
            raise ManifestError(f"Unknown prompt_id: {prompt_id}") from None

    def model(self, model_id: str) -> ModelEntry:
        try:
            return self.models[model_id]
        except KeyError:
            raise ManifestError(f"Unknown model_id: {model_id}") from None

    def family_of(self, prompt_id: str) -> Family:
        return self.prompt(prompt_id).family

    def family_settings(self, family: Family) -> FamilySettings:
        return self.families[family]

    def prompts_in(self, family: Family) -> list[str]:
        return [p.prompt_id for p in self.prompts.values() if p.family == family]

    def cell(
        self, model_id: str, prompt_id: str, method: Method | str, strategy: Strategy | str
    ) -> CellCoord:
        return CellCoord(
            model_id=model_id,
            prompt_id=prompt_id,
            family=self.family_of(prompt_id),
            method=Method(method),
            strategy=Strategy(strategy),
        )


@lru_cache(maxsize=1)
def default_manifest() -> Manifest:
    return Manifest.load()


def family_of(prompt_id: str, manifest: Manifest | None = None) -> Family:
    return (manifest or default_manifest()).family_of(prompt_id)


########################################
# POOL FILES
########################################


def write_pool(pool: Pool, path: str | Path, extra: Mapping[str, Any] | None = None) -> None:
    """
    Write a pool as line-delimited JSON: a header object with the cell, then
    one OutputRecord per line.
    """
    header: dict[str, Any] = {"cell": pool.cell.to_dict(), "stage": pool.stage.value, "n": pool.n}
    if extra:
        header.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"header": header}, ensure_ascii=False, sort_keys=True)]
    lines.extend(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) for r in pool.records)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pool_header(path: str | Path) -> dict[str, Any]:
    with Path(path).open(encoding="utf-8") as handle:
        first = handle.readline()
    return json.loads(first)["header"]


def read_pool(path: str | Path) -> Pool:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])["header"]
    cell = CellCoord.from_dict(header["cell"])
    stage = Stage(header["stage"])
    records = [OutputRecord.from_dict(json.loads(line), cell) for line in lines[1:] if line.strip()]
    return Pool.from_records(cell, stage, records)

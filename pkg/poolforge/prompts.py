"""
Prompt payloads for every cell.

The user prompt is always built from three segments: the task-specific
instructions, the instruction-strategy modifier and the generation-method
block. Every piece of text lives in assets/templates as a separate file, so the
prompt wording can be audited without reading code. Placeholders use jinja2's
`{{ name }}` delimiters.

The strat planning call is the one exception: it has its own system
instruction, embeds the task prompt inside the planning instructions and has
no modifier.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Any, Mapping, Union

from jinja2 import Environment, PackageLoader, StrictUndefined
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from poolforge.core import (
    STRATA_COUNT,
    CellCoord,
    Family,
    Manifest,
    Method,
    Stage,
    Strategy,
    default_manifest,
    output_key,
)
from poolforge.errors import PromptError, StrataPlanError
from poolforge.log import get_logger

logger = get_logger(__name__)

GENERATION_TEMPERATURE = 1.0
PLANNING_TEMPERATURE = 0.0
PLANNING_MAX_TOKENS = 1600
JUDGE_TEMPERATURE = 0.0
JUDGE_MAX_TOKENS = 8
REFERENCE_POOL_SIZE = 150

SEGMENT_SEPARATOR = "\n\n"

_env = Environment(
    loader=PackageLoader("poolforge", "assets/templates"),
    undefined=StrictUndefined,
    autoescape=False,
    keep_trailing_newline=False,
)


def render(template_name: str, **params: Any) -> str:
    return _env.get_template(template_name).render(**params)


@dataclass(frozen=True)
class PromptPayload:
    system_text: str
    user_text: str
    temperature: float
    max_output_tokens: int
    # identifies the call (cell/stage/slot); never part of the prompt text
    call_id: str = ""

    def digest(self) -> str:
        blob = json.dumps(
            [self.system_text, self.user_text, self.temperature, self.max_output_tokens],
            ensure_ascii=False,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def as_text(self) -> str:
        return f"SYSTEM:\n{self.system_text}\n\nUSER:\n{self.user_text}\n"


########################################
# STRATA PLANS
########################################


class Stratum(BaseModel):
    model_config = ConfigDict(frozen=True, extra="ignore")

    stratum_id: int = Field(strict=True, ge=1, le=STRATA_COUNT)
    name: str = Field(min_length=1)
    description: str = Field(min_length=1)
    generation_instruction: str = Field(min_length=1)
    why_broad: str = Field(min_length=1)
    why_distinct: str = Field(min_length=1)


class StrataPlan(BaseModel):
    model_config = ConfigDict(frozen=True, extra="ignore")

    task_id: str = Field(min_length=1)
    strata: tuple[Stratum, ...]

    @model_validator(mode="after")
    def _five_distinct_strata(self) -> "StrataPlan":
        ids = sorted(s.stratum_id for s in self.strata)
        if ids != list(range(1, STRATA_COUNT + 1)):
            raise ValueError(f"expected stratum_id values 1..{STRATA_COUNT}, got {ids}")
        return self

    def stratum(self, stratum_id: int) -> Stratum:
        for s in self.strata:
            if s.stratum_id == stratum_id:
                return s
        raise KeyError(stratum_id)


_FENCE = re.compile(r"^\s*```[a-zA-Z0-9_-]*\s*\n(.*?)\n\s*```\s*$", re.DOTALL)


def _strip_fences(text: str) -> str:
    match = _FENCE.match(text)
    if match:
        return match.group(1)
    # prose around the object: keep the outermost braces
    start, end = text.find("{"), text.rfind("}")
    if start != -1 and end > start:
        return text[start : end + 1]
    return text


def _structure_problems(data: Any) -> list[str]:
    if not isinstance(data, dict):
        return ["top-level JSON value must be an object"]
    problems = []
    task_id = data.get("task_id")
    if not isinstance(task_id, str) or not task_id.strip():
        problems.append("task_id must be a non-empty string")
    strata = data.get("strata")
    if not isinstance(strata, list):
        problems.append("strata must be a list")
        return problems
    if len(strata) != STRATA_COUNT:
        problems.append(f"expected {STRATA_COUNT} strata, got {len(strata)}")

    ids = [entry.get("stratum_id") for entry in strata if isinstance(entry, dict)]
    int_ids = [i for i in ids if isinstance(i, int) and not isinstance(i, bool)]
    duplicates = sorted({i for i in int_ids if int_ids.count(i) > 1})
    if duplicates:
        problems.append(f"duplicate stratum_id values: {duplicates}")
    missing = sorted(set(range(1, STRATA_COUNT + 1)) - set(int_ids))
    if missing:
        problems.append(f"missing stratum_id values: {missing}")

    for index, entry in enumerate(strata):
        if not isinstance(entry, dict):
            problems.append(f"strata[{index}] must be an object")
            continue
        try:
            Stratum.model_validate(entry)
        except ValidationError as e:
            for err in e.errors():
                field = ".".join(str(p) for p in err["loc"]) or "entry"
                problems.append(f"strata[{index}].{field}: {err['msg']}")
        for field in ("name", "description", "generation_instruction", "why_broad", "why_distinct"):
            value = entry.get(field)
            if isinstance(value, str) and value and not value.strip():
                problems.append(f"strata[{index}].{field}: must not be blank")
    return problems


def parse_strata(raw_json_text: str, lenient: bool = False) -> StrataPlan:
    """
    Parse a planning response into a validated StrataPlan.

    Strict mode accepts the JSON object alone (surrounding whitespace allowed).
    Lenient mode first strips markdown fences or prose around the object.
    Every violated requirement is listed in the raised StrataPlanError.
    """
    text = _strip_fences(raw_json_text) if lenient else raw_json_text
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise StrataPlanError([f"not a bare JSON document: {e.msg} (line {e.lineno} col {e.colno})"]) from e

    problems = _structure_problems(data)
    if problems:
        raise StrataPlanError(problems)
    return StrataPlan.model_validate(data)


def serialize_plan(plan: StrataPlan) -> str:
    return json.dumps(plan.model_dump(mode="json"), indent=2, ensure_ascii=False)


def assign_strata(n: int, k: int = STRATA_COUNT) -> list[int]:
    """Slot i gets stratum (i mod k) + 1."""
    if k < 1:
        raise PromptError("stratum count k must be at least 1")
    if n < 1:
        raise PromptError("pool size n must be at least 1")
    return [(i % k) + 1 for i in range(n)]


########################################
# GENERATION PROMPTS
########################################


@dataclass(frozen=True)
class AnchorContext:
    """Seed outputs shown to a second-stage call."""

    self_response: str | None
    peer_responses: tuple[str, ...] = ()


MethodContext = Union[AnchorContext, Stratum, None]


def task_text(prompt_id: str, manifest: Manifest | None = None) -> str:
    condition = (manifest or default_manifest()).prompt(prompt_id)
    return render(condition.template, **condition.vars)


def system_text() -> str:
    return render("system.txt")


def modifier_text(strategy: Strategy) -> str:
    return render(f"modifier_{strategy.value}.txt")


def final_sentence(method: Method, strategy: Strategy) -> str:
    if strategy == Strategy.NEUTRAL:
        return render("final_neutral.txt")
    if method == Method.STRAT:
        return render("final_diverge_open.txt")
    return render("final_diverge_anchored.txt")


def _anchor_block(method: Method, strategy: Strategy, context: AnchorContext) -> str:
    peers = tuple(context.peer_responses)
    expected_peers = {Method.SELF: 0, Method.PEER1: 1, Method.PEER2: 2, Method.REPR: 3}[method]
    if len(peers) != expected_peers:
        raise PromptError(f"{method.value} needs {expected_peers} other responses, got {len(peers)}")
    if method == Method.REPR:
        if context.self_response is not None:
            raise PromptError("repr context shows representative anchors only, not the own seed")
    elif context.self_response is None:
        raise PromptError(f"{method.value} needs the own seed response")
    return render(
        f"method_{method.value}.txt",
        self_response=context.self_response,
        peer_responses=peers,
        final_sentence=final_sentence(method, strategy),
    )


def method_block(
    method: Method, strategy: Strategy, context: MethodContext, stage: Stage = Stage.EVALUATED
) -> str:
    """The generation-method segment; empty for indep and for seed-stage calls."""
    if stage == Stage.SEED:
        if not method.two_stage:
            raise PromptError(f"{method.value} has no seed stage")
        if context is not None:
            raise PromptError("seed-stage calls take no method context")
        return ""
    if method == Method.INDEP:
        if context is not None:
            raise PromptError("indep takes no method context")
        return ""
    if method == Method.STRAT:
        if not isinstance(context, Stratum):
            raise PromptError("strat needs the assigned stratum as context")
        return render(
            "method_strat.txt",
            stratum_name=context.name,
            stratum_description=context.description,
            stratum_instruction=context.generation_instruction,
            final_sentence=final_sentence(method, strategy),
        )
    if not isinstance(context, AnchorContext):
        raise PromptError(f"{method.value} needs anchor texts as context")
    return _anchor_block(method, strategy, context)


def build_prompt(
    cell: CellCoord,
    slot: int,
    context: MethodContext = None,
    stage: Stage = Stage.EVALUATED,
    manifest: Manifest | None = None,
) -> PromptPayload:
    manifest = manifest or default_manifest()
    segments = [task_text(cell.prompt_id, manifest), modifier_text(cell.strategy)]
    block = method_block(cell.method, cell.strategy, context, stage)
    if block:
        segments.append(block)
    return PromptPayload(
        system_text=system_text(),
        user_text=SEGMENT_SEPARATOR.join(segments),
        temperature=GENERATION_TEMPERATURE,
        max_output_tokens=manifest.family_settings(cell.family).max_output_tokens,
        call_id=output_key(cell, stage, slot),
    )


def build_planning_prompt(
    prompt_id: str, n: int = REFERENCE_POOL_SIZE, manifest: Manifest | None = None
) -> PromptPayload:
    return PromptPayload(
        system_text=render("planning_system.txt"),
        user_text=render("planning_user.txt", n=n, task_prompt=task_text(prompt_id, manifest)),
        temperature=PLANNING_TEMPERATURE,
        max_output_tokens=PLANNING_MAX_TOKENS,
        call_id=f"{prompt_id}/plan",
    )


def build_judge_prompt(prompt_id: str, slogan: str, manifest: Manifest | None = None) -> PromptPayload:
    """Slogan-creativity judge prompt; shipped for external scoring runs only."""
    manifest = manifest or default_manifest()
    if manifest.family_of(prompt_id) != Family.SLOGANS:
        raise PromptError(f"judge prompts are defined for slogan tasks only, not {prompt_id}")
    return PromptPayload(
        system_text=render("judge_system.txt"),
        user_text=render("judge_user.txt", task_context=task_text(prompt_id, manifest), candidate_slogan=slogan),
        temperature=JUDGE_TEMPERATURE,
        max_output_tokens=JUDGE_MAX_TOKENS,
        call_id=f"{prompt_id}/judge",
    )


########################################
# AUDIT EXPORT
########################################

# placeholder texts named after the template slots
CANONICAL_STRATUM = Stratum(
    stratum_id=1,
    name="<stratum name>",
    description="<stratum description>",
    generation_instruction="<stratum generation instruction>",
    why_broad="<why broad>",
    why_distinct="<why distinct>",
)


def canonical_context(method: Method) -> MethodContext:
    if method == Method.INDEP:
        return None
    if method == Method.STRAT:
        return CANONICAL_STRATUM
    if method == Method.SELF:
        return AnchorContext("<self response>")
    if method == Method.PEER1:
        return AnchorContext("<self response>", ("<peer response>",))
    if method == Method.PEER2:
        return AnchorContext("<self response>", ("<peer response 1>", "<peer response 2>"))
    return AnchorContext(None, tuple(f"<representative response {i}>" for i in (1, 2, 3)))


def render_goldens(
    manifest: Manifest | None = None, n: int = REFERENCE_POOL_SIZE
) -> dict[str, str]:
    """Every prompt the harness can send, keyed by a relative file path."""
    manifest = manifest or default_manifest()
    files: dict[str, str] = {"system.txt": system_text() + "\n"}

    for strategy in Strategy:
        files[f"modifiers/{strategy.value}.txt"] = modifier_text(strategy) + "\n"
        for method in Method:
            block = method_block(method, strategy, canonical_context(method))
            if block:
                files[f"methods/{method.value}-{strategy.value}.txt"] = block + "\n"

    for prompt_id in manifest.prompts:
        files[f"tasks/{prompt_id}.txt"] = task_text(prompt_id, manifest) + "\n"
        files[f"planning/{prompt_id}.txt"] = build_planning_prompt(prompt_id, n, manifest).as_text()
        for method in Method:
            for strategy in Strategy:
                cell = manifest.cell("<model>", prompt_id, method, strategy)
                payload = build_prompt(cell, 0, canonical_context(method), manifest=manifest)
                files[f"cells/{prompt_id}/{method.value}-{strategy.value}.txt"] = payload.as_text()
        if manifest.family_of(prompt_id) == Family.SLOGANS:
            files[f"judge/{prompt_id}.txt"] = build_judge_prompt(
                prompt_id, "<candidate slogan>", manifest
            ).as_text()

    return files


def judge_prompt_files(manifest: Manifest | None = None) -> dict[str, str]:
    manifest = manifest or default_manifest()
    files = {"judge/system.txt": render("judge_system.txt") + "\n"}
    for prompt_id in manifest.prompts_in(Family.SLOGANS):
        payload = build_judge_prompt(prompt_id, "{candidate_slogan}", manifest)
        files[f"judge/{prompt_id}.user.txt"] = payload.user_text + "\n"
    return files


def golden_index(files: Mapping[str, str]) -> str:
    index = {
        path: hashlib.sha256(content.encode("utf-8")).hexdigest()
        for path, content in sorted(files.items())
    }
    return json.dumps(index, indent=2) + "\n"

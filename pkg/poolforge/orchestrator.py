# poolforge/orchestrator.py

"""
Generation pipelines, one cell at a time.

  - indep:  n independent calls, no method block
  - strat:  one planning call (re-planned on parse failure), then n calls, each
            guided by the stratum assigned to its slot
  - repr / self / peer1 / peer2: an indep-form seed pool first, then one
            second-stage call per slot showing the method's anchor texts

Calls inside a stage fan out over a thread pool and are assembled by slot, so
concurrency never changes what is stored.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from poolforge.backends import Generation, GenerationBackend, generate_with_retries
from poolforge.config import AnchorRule, PartitionPolicy
from poolforge.core import (
    CellCoord,
    Manifest,
    Method,
    OutputRecord,
    Pool,
    Stage,
    TokenUsage,
    default_manifest,
    read_pool,
    write_pool,
)
from poolforge.embeddings import Embedder, EmbeddingCache, embed_pool
from poolforge.errors import BackendError, CellFailure, PartitionError, StrataPlanError
from poolforge.geometry import distance_matrix, select_anchors
from poolforge.log import get_logger
from poolforge.prompts import (
    AnchorContext,
    MethodContext,
    PromptPayload,
    StrataPlan,
    assign_strata,
    build_planning_prompt,
    build_prompt,
    parse_strata,
)

logger = get_logger(__name__)


########################################
# PARTITIONS
########################################


@dataclass(frozen=True)
class Partition:
    groups: tuple[tuple[int, ...], ...]
    arity: int
    policy: PartitionPolicy = PartitionPolicy.CONSECUTIVE
    seed: int = 0

    def group_of(self, slot: int) -> tuple[int, ...]:
        for group in self.groups:
            if slot in group:
                return group
        raise PartitionError(f"slot {slot} is not covered by the partition")

    def partners(self, slot: int) -> tuple[int, ...]:
        return tuple(s for s in self.group_of(slot) if s != slot)

    def to_dict(self) -> dict[str, Any]:
        return {
            "arity": self.arity,
            "policy": self.policy.value,
            "seed": self.seed,
            "groups": [list(g) for g in self.groups],
        }


def make_partition(
    n: int,
    arity: int,
    rng_seed: int = 0,
    policy: PartitionPolicy = PartitionPolicy.CONSECUTIVE,
) -> Partition:
    """
    Split slots 0..n-1 into disjoint groups of `arity`.

    consecutive: (0,1), (2,3), ...   shuffled: slots permuted by the seeded RNG first.
    """
    if arity not in (2, 3):
        raise PartitionError(f"partition arity must be 2 or 3, got {arity}")
    if n < arity or n % arity:
        raise PartitionError(
            f"pool size {n} is not divisible into groups of {arity}; choose n as a multiple of {arity}"
        )
    slots = np.arange(n)
    if policy == PartitionPolicy.SHUFFLED:
        slots = np.random.default_rng(rng_seed).permutation(n)
    groups = tuple(tuple(int(s) for s in slots[i : i + arity]) for i in range(0, n, arity))
    return Partition(groups, arity, policy, rng_seed)


########################################
# CELL RESULTS
########################################


@dataclass(frozen=True)
class PlanningAttempt:
    attempt: int
    raw_text: str
    usage: TokenUsage
    problems: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.problems

    def to_dict(self) -> dict[str, Any]:
        return {
            "attempt": self.attempt,
            "raw_text": self.raw_text,
            "usage": self.usage.to_dict(),
            "problems": list(self.problems),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PlanningAttempt":
        return cls(
            attempt=int(data["attempt"]),
            raw_text=data["raw_text"],
            usage=TokenUsage.from_dict(data["usage"]),
            problems=tuple(data.get("problems") or ()),
        )


@dataclass(frozen=True)
class CellRun:
    cell: CellCoord
    evaluated: Pool
    seed: Pool | None = None
    plan: StrataPlan | None = None
    planning: tuple[PlanningAttempt, ...] = ()
    anchors: tuple[int, ...] | None = None
    partition: Partition | None = None

    @property
    def planning_usage(self) -> TokenUsage:
        return TokenUsage.sum(a.usage for a in self.planning)

    @property
    def usage(self) -> TokenUsage:
        """Every call the cell made: planning attempts, seed and evaluated pools."""
        total = self.planning_usage + self.evaluated.usage
        if self.seed is not None:
            total = total + self.seed.usage
        return total


########################################
# RUNNER
########################################


@dataclass
class CellRunner:
    backend: GenerationBackend
    manifest: Manifest = field(default_factory=default_manifest)
    concurrency: int = 8
    max_attempts: int = 3
    backoff_seconds: float = 1.0
    planning_retries: int = 2
    lenient_planning: bool = False
    partition_policy: PartitionPolicy = PartitionPolicy.CONSECUTIVE
    partition_seed: int = 0
    anchor_rule: AnchorRule = AnchorRule.MAX_MIN
    # repr only
    embedder: Embedder | None = None
    embedding_cache: EmbeddingCache | None = None

    def _call(self, payload: PromptPayload) -> Generation:
        return generate_with_retries(self.backend, payload, self.max_attempts, self.backoff_seconds)

    def _fan_out(
        self,
        cell: CellCoord,
        stage: Stage,
        payloads: Mapping[int, PromptPayload],
        extras: Mapping[int, dict[str, Any]] | None = None,
    ) -> Pool:
        extras = extras or {}
        records: list[OutputRecord] = []
        errors: dict[int, str] = {}
        with ThreadPoolExecutor(max_workers=max(1, min(self.concurrency, len(payloads)))) as pool:
            futures = {pool.submit(self._call, payload): slot for slot, payload in payloads.items()}
            for future in as_completed(futures):
                slot = futures[future]
                try:
                    generation = future.result()
                except BackendError as e:
                    errors[slot] = str(e)
                    continue
                records.append(
                    OutputRecord(cell, stage, slot, generation.text, generation.usage, **extras.get(slot, {}))
                )

        result = Pool.from_records(cell, stage, records)
        if errors:
            first = min(errors)
            raise CellFailure(
                f"{cell.key}: {len(errors)} {stage.value} calls failed (first: slot {first}: {errors[first]})",
                partial={f"{stage.value}_partial": result},
            )
        return result

    def run(self, cell: CellCoord, n: int) -> CellRun:
        if n < 2:
            logger.warning("%s: pool of %d is insufficient for pairwise metrics", cell.key, n)
        if cell.method == Method.INDEP:
            return self.run_indep(cell, n)
        if cell.method == Method.STRAT:
            return self.run_strat(cell, n)
        return self.run_two_stage(cell, n)

    def run_indep(self, cell: CellCoord, n: int) -> CellRun:
        if cell.method != Method.INDEP:
            raise ValueError(f"run_indep called for {cell.method.value}")
        payloads = {slot: build_prompt(cell, slot, manifest=self.manifest) for slot in range(n)}
        return CellRun(cell, self._fan_out(cell, Stage.EVALUATED, payloads))

    def plan_strata(self, cell: CellCoord, n: int) -> tuple[StrataPlan | None, tuple[PlanningAttempt, ...]]:
        """Planning call plus up to `planning_retries` re-plans; every attempt is kept."""
        attempts: list[PlanningAttempt] = []
        base = build_planning_prompt(cell.prompt_id, n, self.manifest)
        for attempt in range(self.planning_retries + 1):
            payload = replace(base, call_id=f"{cell.prompt_id}/plan/{cell.model_id}/{attempt}")
            try:
                generation = self._call(payload)
            except BackendError as e:
                raise CellFailure(
                    f"{cell.key}: planning call failed: {e}", partial={"planning": tuple(attempts)}
                ) from e
            try:
                plan = parse_strata(generation.text, lenient=self.lenient_planning)
            except StrataPlanError as e:
                logger.warning("%s: planning attempt %d rejected: %s", cell.key, attempt, e)
                attempts.append(PlanningAttempt(attempt, generation.text, generation.usage, tuple(e.problems)))
                continue
            attempts.append(PlanningAttempt(attempt, generation.text, generation.usage))
            return plan, tuple(attempts)
        return None, tuple(attempts)

    def run_strat(self, cell: CellCoord, n: int) -> CellRun:
        if cell.method != Method.STRAT:
            raise ValueError(f"run_strat called for {cell.method.value}")
        plan, attempts = self.plan_strata(cell, n)
        if plan is None:
            raise CellFailure(
                f"{cell.key}: planning output unparseable after {len(attempts)} attempts",
                partial={"planning": attempts},
            )

        assignment = assign_strata(n)
        payloads = {
            slot: build_prompt(cell, slot, plan.stratum(assignment[slot]), manifest=self.manifest)
            for slot in range(n)
        }
        extras = {slot: {"stratum_id": assignment[slot]} for slot in range(n)}
        try:
            evaluated = self._fan_out(cell, Stage.EVALUATED, payloads, extras)
        except CellFailure as e:
            e.partial["planning"] = attempts
            raise
        return CellRun(cell, evaluated, plan=plan, planning=attempts)

    def _anchor_contexts(
        self, cell: CellCoord, seed: Pool
    ) -> tuple[dict[int, MethodContext], dict[int, tuple[int, ...]], tuple[int, ...] | None, Partition | None]:
        n = seed.n
        texts = seed.texts
        method = cell.method

        if method == Method.SELF:
            contexts = {s: AnchorContext(texts[s]) for s in range(n)}
            return contexts, {s: (s,) for s in range(n)}, None, None

        if method in (Method.PEER1, Method.PEER2):
            arity = 2 if method == Method.PEER1 else 3
            partition = make_partition(n, arity, self.partition_seed, self.partition_policy)
            contexts, anchor_slots = {}, {}
            for s in range(n):
                partners = partition.partners(s)
                contexts[s] = AnchorContext(texts[s], tuple(texts[p] for p in partners))
                anchor_slots[s] = (s, *partners)
            return contexts, anchor_slots, None, partition

        # repr: the same three representative seeds for every call
        if self.embedder is None:
            raise CellFailure(f"{cell.key}: repr needs an embedder to select anchors")
        embeddings = embed_pool(seed, self.embedder, self.embedding_cache)
        anchors = tuple(select_anchors(distance_matrix(embeddings), method.anchor_count, self.anchor_rule))
        context = AnchorContext(None, tuple(texts[a] for a in anchors))
        return {s: context for s in range(n)}, {s: anchors for s in range(n)}, anchors, None

    def run_two_stage(self, cell: CellCoord, n: int) -> CellRun:
        if not cell.method.two_stage:
            raise ValueError(f"run_two_stage called for {cell.method.value}")

        seed_payloads = {
            slot: build_prompt(cell, slot, stage=Stage.SEED, manifest=self.manifest) for slot in range(n)
        }
        seed = self._fan_out(cell, Stage.SEED, seed_payloads)
        logger.debug("%s: seed pool complete (%d outputs)", cell.key, seed.n)

        try:
            contexts, anchor_slots, anchors, partition = self._anchor_contexts(cell, seed)
            payloads = {
                slot: build_prompt(cell, slot, contexts[slot], manifest=self.manifest) for slot in range(n)
            }
            extras = {slot: {"anchor_slots": anchor_slots[slot]} for slot in range(n)}
            evaluated = self._fan_out(cell, Stage.EVALUATED, payloads, extras)
        except CellFailure as e:
            e.partial["seed"] = seed
            raise
        return CellRun(cell, evaluated, seed=seed, anchors=anchors, partition=partition)


########################################
# RUN DIRECTORIES
########################################

SEED_FILE = "seed.jsonl"
EVALUATED_FILE = "evaluated.jsonl"
PLANNING_FILE = "planning.json"
META_FILE = "meta.json"
# pools a failed cell left behind, e.g. evaluated_partial.jsonl
PARTIAL_GLOB = "*_partial.jsonl"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def cell_dir(root: str | Path, cell: CellCoord) -> Path:
    return Path(root) / "cells" / cell.model_id / cell.prompt_id / f"{cell.method.value}-{cell.strategy.value}"


def cell_hash(cell: CellCoord, n: int, generation_hash: str) -> str:
    blob = f"{generation_hash}|{cell.key}|{n}"
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def read_meta(directory: str | Path) -> dict[str, Any] | None:
    path = Path(directory) / META_FILE
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def is_complete(directory: str | Path, expected_hash: str) -> bool:
    meta = read_meta(directory)
    return bool(meta) and meta.get("status") == "complete" and meta.get("cell_hash") == expected_hash


def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def write_cell_run(
    run: CellRun,
    directory: str | Path,
    generation_hash: str,
    n: int,
    started_at: str,
    settings: Mapping[str, Any] | None = None,
) -> None:
    directory = Path(directory)
    for stale in directory.glob(PARTIAL_GLOB):
        stale.unlink()
    stamp = {"generation_hash": generation_hash}
    if run.seed is not None:
        write_pool(run.seed, directory / SEED_FILE, stamp)
    write_pool(run.evaluated, directory / EVALUATED_FILE, stamp)
    if run.planning:
        _write_json(
            directory / PLANNING_FILE,
            {
                "attempts": [a.to_dict() for a in run.planning],
                "plan": run.plan.model_dump(mode="json") if run.plan else None,
            },
        )
    _write_json(
        directory / META_FILE,
        {
            "cell": run.cell.to_dict(),
            "status": "complete",
            "n": n,
            "generation_hash": generation_hash,
            "cell_hash": cell_hash(run.cell, n, generation_hash),
            "settings": dict(settings or {}),
            "anchors": list(run.anchors) if run.anchors is not None else None,
            "partition": run.partition.to_dict() if run.partition else None,
            "usage": run.usage.to_dict(),
            "started_at": started_at,
            "finished_at": utc_now(),
        },
    )


def write_cell_failure(
    cell: CellCoord,
    failure: CellFailure,
    directory: str | Path,
    generation_hash: str,
    n: int,
    started_at: str,
) -> None:
    """Persist whatever the failed cell produced, plus a failed meta file."""
    directory = Path(directory)
    stamp = {"generation_hash": generation_hash}
    for name, artifact in failure.partial.items():
        if isinstance(artifact, Pool):
            write_pool(artifact, directory / f"{name}.jsonl", stamp)
        elif name == "planning":
            _write_json(directory / PLANNING_FILE, {"attempts": [a.to_dict() for a in artifact], "plan": None})
    _write_json(
        directory / META_FILE,
        {
            "cell": cell.to_dict(),
            "status": "failed",
            "n": n,
            "generation_hash": generation_hash,
            "cell_hash": cell_hash(cell, n, generation_hash),
            "error": str(failure),
            "started_at": started_at,
            "finished_at": utc_now(),
        },
    )


def read_cell_run(directory: str | Path) -> CellRun:
    directory = Path(directory)
    meta = read_meta(directory)
    if not meta or meta.get("status") != "complete":
        raise FileNotFoundError(f"no complete cell run in {directory}")
    cell = CellCoord.from_dict(meta["cell"])
    seed_path = directory / SEED_FILE
    planning: tuple[PlanningAttempt, ...] = ()
    plan = None
    if (directory / PLANNING_FILE).exists():
        data = json.loads((directory / PLANNING_FILE).read_text(encoding="utf-8"))
        planning = tuple(PlanningAttempt.from_dict(a) for a in data["attempts"])
        plan = StrataPlan.model_validate(data["plan"]) if data.get("plan") else None
    partition = None
    if meta.get("partition"):
        p = meta["partition"]
        partition = Partition(
            tuple(tuple(g) for g in p["groups"]), p["arity"], PartitionPolicy(p["policy"]), p["seed"]
        )
    return CellRun(
        cell=cell,
        evaluated=read_pool(directory / EVALUATED_FILE),
        seed=read_pool(seed_path) if seed_path.exists() else None,
        plan=plan,
        planning=planning,
        anchors=tuple(meta["anchors"]) if meta.get("anchors") is not None else None,
        partition=partition,
    )

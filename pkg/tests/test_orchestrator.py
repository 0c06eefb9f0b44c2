from __future__ import annotations

from collections import Counter

import pytest

from poolforge.backends import Generation, MockBackend
from poolforge.config import PartitionPolicy
from poolforge.core import TokenUsage, validate_pool
from poolforge.embeddings import MockEmbedder
from poolforge.errors import BackendError, CellFailure, PartitionError
from poolforge.orchestrator import (
    CellRunner,
    cell_dir,
    cell_hash,
    is_complete,
    make_partition,
    read_cell_run,
    read_meta,
    utc_now,
    write_cell_failure,
    write_cell_run,
)


class BadPlanBackend(MockBackend):
    """Answers planning calls with prose; everything else as the mock does."""

    def generate(self, payload):
        if payload.call_id.split("/")[1] == "plan":
            with self._lock:
                self.calls += 1
            return Generation("I cannot do that.", TokenUsage(5, 4))
        return super().generate(payload)


class FailingSlotBackend(MockBackend):
    def __init__(self, failing_call: str, **kwargs):
        super().__init__(**kwargs)
        self.failing_call = failing_call

    def generate(self, payload):
        if payload.call_id == self.failing_call:
            raise BackendError("boom")
        return super().generate(payload)


def _runner(backend=None, **kwargs) -> CellRunner:
    return CellRunner(backend=backend or MockBackend(model_id="m"), backoff_seconds=0.0, max_attempts=1, **kwargs)


def test_partitions_cover_slots_exactly_once():
    dyads = make_partition(150, 2)
    triads = make_partition(150, 3)
    assert len(dyads.groups) == 75
    assert len(triads.groups) == 50
    assert sorted(s for g in triads.groups for s in g) == list(range(150))
    assert dyads.partners(3) == (2,)
    assert triads.partners(4) == (3, 5)

    shuffled = make_partition(12, 3, rng_seed=7, policy=PartitionPolicy.SHUFFLED)
    assert shuffled == make_partition(12, 3, rng_seed=7, policy=PartitionPolicy.SHUFFLED)
    assert sorted(s for g in shuffled.groups for s in g) == list(range(12))


@pytest.mark.parametrize("n, arity", [(7, 2), (8, 3), (6, 4), (1, 2)])
def test_partition_rejects_bad_sizes(n, arity):
    with pytest.raises(PartitionError):
        make_partition(n, arity)


def test_indep_cell(manifest):
    cell = manifest.cell("m", "aut_key", "indep", "neutral")
    backend = MockBackend(model_id="m")
    run = _runner(backend).run(cell, 8)
    assert run.evaluated.n == 8
    assert run.seed is None
    assert backend.calls == 8
    assert validate_pool(run.evaluated) == []
    assert run.usage == run.evaluated.usage


def test_concurrency_does_not_change_pools(manifest):
    cell = manifest.cell("m", "slogan_soda", "peer1", "diverge")
    serial = CellRunner(backend=MockBackend(model_id="m"), concurrency=1).run(cell, 6)
    parallel = CellRunner(backend=MockBackend(model_id="m"), concurrency=6).run(cell, 6)
    assert serial.evaluated == parallel.evaluated
    assert serial.seed == parallel.seed


def test_strat_cell_assigns_strata_cyclically(manifest):
    cell = manifest.cell("m", "story_life", "strat", "diverge")
    backend = MockBackend(model_id="m")
    run = _runner(backend).run(cell, 10)
    assert Counter(r.stratum_id for r in run.evaluated.records) == {1: 2, 2: 2, 3: 2, 4: 2, 5: 2}
    assert len(run.planning) == 1 and run.planning[0].ok
    assert backend.calls == 11
    assert run.usage.total == run.planning_usage.total + run.evaluated.usage.total
    assert validate_pool(run.evaluated) == []


def test_strat_replans_then_fails_keeping_attempts(manifest):
    cell = manifest.cell("m", "story_life", "strat", "neutral")
    backend = BadPlanBackend(model_id="m")
    with pytest.raises(CellFailure) as info:
        _runner(backend, planning_retries=2).run(cell, 5)
    attempts = info.value.partial["planning"]
    assert len(attempts) == 3
    assert all(not a.ok for a in attempts)
    assert backend.calls == 3


@pytest.mark.parametrize("method, anchors", [("self", 1), ("peer1", 2), ("peer2", 3)])
def test_anchor_methods_show_their_group(manifest, method, anchors):
    cell = manifest.cell("m", "aut_shoe", method, "neutral")
    run = _runner().run(cell, 6)
    assert run.seed.n == run.evaluated.n == 6
    for record in run.evaluated.records:
        assert len(record.anchor_slots) == anchors
        assert record.anchor_slots[0] == record.slot
    assert validate_pool(run.evaluated) == []
    assert validate_pool(run.seed) == []
    assert run.usage.total == run.seed.usage.total + run.evaluated.usage.total


def test_peer_pool_size_must_divide(manifest):
    cell = manifest.cell("m", "aut_shoe", "peer2", "neutral")
    with pytest.raises(PartitionError):
        _runner().run(cell, 5)


def test_repr_shows_the_same_anchors_to_every_call(manifest):
    cell = manifest.cell("m", "slogan_blood", "repr", "diverge")
    run = _runner(embedder=MockEmbedder(16)).run(cell, 9)
    assert len(run.anchors) == 3
    assert {r.anchor_slots for r in run.evaluated.records} == {run.anchors}
    assert validate_pool(run.evaluated) == []


def test_repr_without_embedder_fails(manifest):
    cell = manifest.cell("m", "slogan_blood", "repr", "neutral")
    with pytest.raises(CellFailure) as info:
        _runner().run(cell, 4)
    assert info.value.partial["seed"].n == 4


def test_failed_calls_keep_partial_pools(manifest):
    cell = manifest.cell("m", "aut_key", "self", "neutral")
    backend = FailingSlotBackend(f"{cell.key}/evaluated/2", model_id="m")
    with pytest.raises(CellFailure) as info:
        _runner(backend).run(cell, 4)
    partial = info.value.partial
    assert partial["seed"].n == 4
    assert [r.slot for r in partial["evaluated_partial"].records] == [0, 1, 3]


def test_run_directory_round_trip(tmp_path, manifest):
    cell = manifest.cell("m", "story_jungle", "strat", "neutral")
    run = _runner().run(cell, 5)
    directory = cell_dir(tmp_path, cell)
    write_cell_run(run, directory, "gen123", 5, utc_now(), {"backend": "mock:m"})
    meta = read_meta(directory)
    assert meta["status"] == "complete"
    assert meta["usage"]["prompt_tokens"] == run.usage.prompt_tokens
    assert is_complete(directory, cell_hash(cell, 5, "gen123"))
    assert not is_complete(directory, cell_hash(cell, 6, "gen123"))
    loaded = read_cell_run(directory)
    assert loaded.evaluated == run.evaluated
    assert loaded.plan == run.plan
    assert loaded.usage == run.usage


def test_failure_directory_is_not_complete(tmp_path, manifest):
    cell = manifest.cell("m", "aut_key", "peer1", "neutral")
    directory = cell_dir(tmp_path, cell)
    seed = _runner().run(cell, 2).seed
    failure = CellFailure("boom", partial={"seed": seed})
    write_cell_failure(cell, failure, directory, "gen123", 2, utc_now())
    assert read_meta(directory)["status"] == "failed"
    assert (directory / "seed.jsonl").exists()
    assert not is_complete(directory, cell_hash(cell, 2, "gen123"))


def test_successful_rerun_drops_partial_pools(tmp_path, manifest):
    cell = manifest.cell("m", "aut_key", "self", "neutral")
    directory = cell_dir(tmp_path, cell)
    backend = FailingSlotBackend(f"{cell.key}/evaluated/2", model_id="m")
    with pytest.raises(CellFailure) as info:
        _runner(backend).run(cell, 4)
    write_cell_failure(cell, info.value, directory, "gen123", 4, utc_now())
    assert (directory / "evaluated_partial.jsonl").exists()

    write_cell_run(_runner().run(cell, 4), directory, "gen123", 4, utc_now())
    assert not (directory / "evaluated_partial.jsonl").exists()
    assert sorted(p.name for p in directory.iterdir()) == ["evaluated.jsonl", "meta.json", "seed.jsonl"]
    assert is_complete(directory, cell_hash(cell, 4, "gen123"))

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import yaml

from poolforge.core import CellCoord, OutputRecord, Pool, Stage, TokenUsage, default_manifest
from poolforge.geometry import DistanceMatrix, EmbeddingSet, distance_matrix, normalize_rows

GOLDENS = Path(__file__).parent / "goldens"


@pytest.fixture
def manifest():
    return default_manifest()


@pytest.fixture
def cell(manifest) -> CellCoord:
    return manifest.cell("gpt-5.4", "story_jungle", "indep", "neutral")


def make_pool(cell: CellCoord, texts: list[str], stage: Stage = Stage.EVALUATED, extras: dict[int, dict] | None = None) -> Pool:
    extras = extras or {}
    records = [
        OutputRecord(cell, stage, slot, text, TokenUsage(10, len(text.split())), **extras.get(slot, {}))
        for slot, text in enumerate(texts)
    ]
    return Pool.from_records(cell, stage, records)


def random_embeddings(n: int, dim: int = 8, seed: int = 0) -> EmbeddingSet:
    rng = np.random.default_rng(seed)
    return EmbeddingSet(normalize_rows(rng.standard_normal((n, dim))), "test")


def random_distances(n: int, dim: int = 8, seed: int = 0) -> DistanceMatrix:
    return distance_matrix(random_embeddings(n, dim, seed))


def write_config(tmp_path: Path, **overrides) -> Path:
    """A small mock run: one model, one slogan and one AUT prompt, every method."""
    data = {
        "models": ["gpt-5.4"],
        "prompts": ["slogan_soda", "aut_shoe"],
        "n": 6,
        "output_dir": str(tmp_path / "run"),
        "backend": {"kind": "mock", "concurrency": 4, "backoff_seconds": 0.0},
        "embedder": {"name": "mock:16"},
        "regions": {"n_init": 2},
        "analysis": {"rarefaction_repeats": 20, "bootstrap_replicates": 100},
    }
    data.update(overrides)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path

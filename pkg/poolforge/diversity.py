"""
Pool-level diversity metrics and rarefaction.

Distance-based metrics take a DistanceMatrix; the region entropy takes the
pool's prompt-level region labels. Rarefaction curves are stored per replicate
so that intervals and first-hit sizes can be computed afterwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.cluster import KMeans

from poolforge.config import RegionConfig
from poolforge.errors import MetricError
from poolforge.geometry import DistanceMatrix, medoid
from poolforge.log import get_logger

logger = get_logger(__name__)


def _require_pairs(distances: DistanceMatrix, name: str) -> None:
    if distances.n < 2:
        raise MetricError(f"{name} is undefined for a pool of {distances.n} (needs at least 2)")


def d_pair(distances: DistanceMatrix) -> float:
    """Mean distance over the n(n-1)/2 unordered pairs."""
    _require_pairs(distances, "d_pair")
    n = distances.n
    upper = distances.values[np.triu_indices(n, k=1)]
    return float(upper.sum() * 2.0 / (n * (n - 1)))


def d_nn(distances: DistanceMatrix) -> float:
    _require_pairs(distances, "d_nn")
    values = distances.values.copy()
    np.fill_diagonal(values, np.inf)
    return float(values.min(axis=1).mean())


def d_med(distances: DistanceMatrix) -> float:
    """Mean distance to the medoid, the medoid's own zero included."""
    if distances.n < 1:
        raise MetricError("d_med of an empty pool")
    return float(distances.values[medoid(distances)].mean())


def mst_edges(distances: DistanceMatrix) -> list[tuple[int, int, float]]:
    """Prim's algorithm on the dense matrix, grown from slot 0; ties go to the lower index."""
    n = distances.n
    values = distances.values
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = values[0].copy()
    parent = np.zeros(n, dtype=int)
    edges = []
    for _ in range(n - 1):
        candidates = np.where(in_tree, np.inf, best)
        j = int(np.argmin(candidates))
        edges.append((int(parent[j]), j, float(best[j])))
        in_tree[j] = True
        closer = (~in_tree) & (values[j] < best)
        best[closer] = values[j][closer]
        parent[closer] = j
    return edges


def d_mst(distances: DistanceMatrix) -> float:
    _require_pairs(distances, "d_mst")
    return float(sum(w for _, _, w in mst_edges(distances)) / (distances.n - 1))


########################################
# SEMANTIC REGIONS
########################################


@dataclass(frozen=True, eq=False)
class RegionModel:
    prompt_id: str
    k: int
    centroids: np.ndarray
    # output key -> region index
    labels: Mapping[str, int]
    seed: int
    n_init: int
    inertia: float = float("nan")

    def labels_for(self, keys: Iterable[str]) -> np.ndarray:
        try:
            return np.array([self.labels[key] for key in keys], dtype=int)
        except KeyError as e:
            raise MetricError(f"{self.prompt_id}: output {e.args[0]} has no region; refit the regions") from None

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / f"{self.prompt_id}.centroids.npy", self.centroids)
        meta = {
            "prompt_id": self.prompt_id,
            "k": self.k,
            "seed": self.seed,
            "n_init": self.n_init,
            "inertia": self.inertia,
            "labels": dict(self.labels),
        }
        (directory / f"{self.prompt_id}.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path, prompt_id: str) -> "RegionModel":
        directory = Path(directory)
        meta = json.loads((directory / f"{prompt_id}.json").read_text(encoding="utf-8"))
        return cls(
            prompt_id=meta["prompt_id"],
            k=int(meta["k"]),
            centroids=np.load(directory / f"{prompt_id}.centroids.npy"),
            labels={key: int(v) for key, v in meta["labels"].items()},
            seed=int(meta["seed"]),
            n_init=int(meta["n_init"]),
            inertia=float(meta["inertia"]),
        )


def kmeans_tolerance(vectors: np.ndarray, tol: float) -> float:
    """
    The `tol` to hand sklearn for an absolute bound on the squared centroid shift.

    sklearn multiplies `tol` by the mean per-feature variance of the data.
    """
    variance = float(np.mean(np.var(vectors, axis=0)))
    return tol / variance if variance > 0 else tol


def fit_regions(
    prompt_id: str,
    keys: Sequence[str],
    vectors: np.ndarray,
    k: int,
    config: RegionConfig | None = None,
) -> RegionModel:
    """
    K-means over every output generated for one prompt (all models, methods and
    strategies pooled). Random-point initialization, best inertia of n_init runs.
    """
    config = config or RegionConfig()
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(keys) != vectors.shape[0]:
        raise MetricError(f"{prompt_id}: {len(keys)} keys for {vectors.shape[0]} vectors")
    if vectors.shape[0] < k:
        raise MetricError(f"{prompt_id}: corpus of {vectors.shape[0]} outputs is smaller than K={k}")

    kmeans = KMeans(
        n_clusters=k,
        init="random",
        n_init=config.n_init,
        max_iter=config.max_iter,
        tol=kmeans_tolerance(vectors, config.tol),
        random_state=config.seed,
        algorithm="lloyd",
    )
    labels = kmeans.fit_predict(vectors)
    logger.info("%s: fitted %d regions over %d outputs (inertia %.4f)", prompt_id, k, len(keys), kmeans.inertia_)
    return RegionModel(
        prompt_id=prompt_id,
        k=k,
        centroids=kmeans.cluster_centers_,
        labels={key: int(label) for key, label in zip(keys, labels)},
        seed=config.seed,
        n_init=config.n_init,
        inertia=float(kmeans.inertia_),
    )


def _entropy_from_counts(counts: np.ndarray, k: int) -> np.ndarray:
    """Normalized entropy for each row of region counts; 0 log 0 is 0."""
    counts = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    totals = counts.sum(axis=1, keepdims=True)
    shares = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    logs = np.log(shares, out=np.zeros_like(shares), where=shares > 0)
    return -(shares * logs).sum(axis=1) / np.log(k)


def d_ent(labels: Sequence[int], k: int) -> float:
    if k < 2:
        raise MetricError(f"region entropy needs K >= 2, got {k}")
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise MetricError("region entropy of an empty pool")
    if labels.min() < 0 or labels.max() >= k:
        raise MetricError(f"region labels must lie in 0..{k - 1}")
    return float(_entropy_from_counts(np.bincount(labels, minlength=k), k)[0])


@dataclass(frozen=True)
class DiversityReport:
    d_pair: float
    d_nn: float
    d_med: float
    d_mst: float
    d_ent: float

    def to_dict(self) -> dict[str, float]:
        return {
            "d_pair": self.d_pair,
            "d_nn": self.d_nn,
            "d_med": self.d_med,
            "d_mst": self.d_mst,
            "d_ent": self.d_ent,
        }


def diversity_report(distances: DistanceMatrix, labels: Sequence[int], k: int) -> DiversityReport:
    return DiversityReport(
        d_pair=d_pair(distances),
        d_nn=d_nn(distances),
        d_med=d_med(distances),
        d_mst=d_mst(distances),
        d_ent=d_ent(labels, k),
    )


########################################
# RAREFACTION
########################################


class RarefiedMetric(str, Enum):
    D_PAIR = "d_pair"
    D_ENT = "d_ent"

    @property
    def q_min(self) -> int:
        # d_pair is set to 0 at q=1 and left out of the AUC
        return 2 if self == RarefiedMetric.D_PAIR else 1


@dataclass(frozen=True)
class RegionLabels:
    """A pool's region labels together with the prompt-level K."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=int))

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class RarefactionCurve:
    metric: RarefiedMetric
    # values[r, q - 1] is replicate r at subpool size q
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def repeats(self) -> int:
        return self.values.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.arange(1, self.n + 1)

    @property
    def means(self) -> np.ndarray:
        return self.values.mean(axis=0)

    @property
    def q_min(self) -> int:
        return self.metric.q_min

    def replicate(self, r: int) -> np.ndarray:
        return self.values[r]


def _pairwise_prefix_curve(distances: DistanceMatrix, order: np.ndarray) -> np.ndarray:
    sub = distances.values[np.ix_(order, order)]
    pair_sums = np.cumsum(np.tril(sub, k=-1).sum(axis=1))
    q = np.arange(1, len(order) + 1, dtype=np.float64)
    pairs = q * (q - 1) / 2.0
    return np.divide(pair_sums, pairs, out=np.zeros_like(pair_sums), where=pairs > 0)


def _entropy_prefix_curve(regions: RegionLabels, order: np.ndarray) -> np.ndarray:
    one_hot = np.zeros((len(order), regions.k))
    one_hot[np.arange(len(order)), regions.labels[order]] = 1.0
    return _entropy_from_counts(np.cumsum(one_hot, axis=0), regions.k)


def rarefy(
    inputs: DistanceMatrix | RegionLabels,
    metric: RarefiedMetric | str,
    repeats: int = 200,
    rng_seed: int | np.random.SeedSequence = 0,
) -> RarefactionCurve:
    """
    Rarefaction curve over subpool sizes 1..n.

    Each replicate draws one random order of the pool and takes its first q
    slots as the size-q subpool, which is a uniform draw without replacement
    for every q. At q = n every replicate holds the full-pool value exactly.
    """
    metric = RarefiedMetric(metric)
    if repeats < 1:
        raise MetricError("rarefaction needs at least one replicate")

    if metric == RarefiedMetric.D_PAIR:
        if not isinstance(inputs, DistanceMatrix):
            raise MetricError("d_pair rarefaction takes a distance matrix")
        n = inputs.n
        full = d_pair(inputs) if n >= 2 else 0.0
        curve_of = partial(_pairwise_prefix_curve, inputs)
    else:
        if not isinstance(inputs, RegionLabels):
            raise MetricError("d_ent rarefaction takes region labels")
        n = inputs.n
        full = d_ent(inputs.labels, inputs.k)
        curve_of = partial(_entropy_prefix_curve, inputs)
    if n < 1:
        raise MetricError("cannot rarefy an empty pool")

    rng = np.random.default_rng(rng_seed)
    values = np.empty((repeats, n))
    for r in range(repeats):
        values[r] = curve_of(rng.permutation(n))
    values[:, n - 1] = full
    return RarefactionCurve(metric, values)


def rarefaction_auc(curve: RarefactionCurve) -> float:
    """Mean of the per-size means over q_min..n."""
    return float(curve.means[curve.q_min - 1 :].mean())


def first_hit(values: Sequence[float], target: float, q_min: int = 1) -> int | None:
    """Smallest q >= q_min whose replicate value reaches target; None if none does."""
    values = np.asarray(values, dtype=np.float64)
    hits = np.flatnonzero(values[q_min - 1 :] >= target)
    if hits.size == 0:
        return None
    return int(hits[0]) + q_min

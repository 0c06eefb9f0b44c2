"""
Embedding-space primitives: unit-normalized embedding sets, cosine-distance
matrices, the medoid and medoid-start farthest-first anchor selection.

Matrices are dense (a pool is a few hundred outputs at most). Ties are broken
by the lowest slot index everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from poolforge.config import AnchorRule
from poolforge.errors import GeometryError

NORM_TOLERANCE = 1e-6


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise GeometryError(f"expected a 2-D matrix, got shape {matrix.shape}")
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise GeometryError("cannot normalize a zero vector")
    return matrix / norms


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    vectors: np.ndarray
    source_id: str

    def __post_init__(self):
        vectors = _frozen(self.vectors)
        if vectors.ndim != 2:
            raise GeometryError(f"embedding matrix must be 2-D, got shape {vectors.shape}")
        norms = np.linalg.norm(vectors, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
        if bad.size:
            raise GeometryError(f"rows {bad.tolist()[:5]} are not unit length")
        object.__setattr__(self, "vectors", vectors)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def take(self, indices) -> "EmbeddingSet":
        return EmbeddingSet(self.vectors[np.asarray(indices, dtype=int)], self.source_id)


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """Symmetric cosine distances d_ij = 1 - cos(f_i, f_j), zero diagonal."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise GeometryError(f"distance matrix must be square, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def take(self, indices) -> "DistanceMatrix":
        """Sub-matrix over a list of indices; repeated indices are allowed."""
        idx = np.asarray(indices, dtype=int)
        return DistanceMatrix(self.values[np.ix_(idx, idx)])


def distance_matrix(embeddings: EmbeddingSet) -> DistanceMatrix:
    vectors = embeddings.vectors
    similarity = vectors @ vectors.T
    # one triangle computed, then mirrored: exact symmetry and a zero diagonal
    upper = np.triu(1.0 - similarity, k=1)
    values = upper + upper.T
    np.clip(values, 0.0, 2.0, out=values)
    return DistanceMatrix(values)


def medoid(distances: DistanceMatrix) -> int:
    """Index with the smallest row sum; lowest index on ties."""
    if distances.n < 1:
        raise GeometryError("medoid of an empty pool")
    return int(np.argmin(distances.values.sum(axis=1)))


def select_anchors(
    distances: DistanceMatrix, m: int, rule: AnchorRule = AnchorRule.MAX_MIN
) -> list[int]:
    """
    Medoid-start farthest-first selection of m anchors.

    The first anchor is the medoid. Each further anchor maximizes its minimum
    distance to the anchors chosen so far (max_min), or the summed distance
    (max_sum). Returns indices in selection order.
    """
    n = distances.n
    if m < 1:
        raise GeometryError("need at least one anchor")
    if m > n:
        raise GeometryError(f"cannot select {m} anchors from a pool of {n}")

    values = distances.values
    selected = [medoid(distances)]
    score = values[selected[0]].copy()
    for _ in range(m - 1):
        candidates = score.copy()
        candidates[selected] = -np.inf
        chosen = int(np.argmax(candidates))
        selected.append(chosen)
        if rule == AnchorRule.MAX_MIN:
            score = np.minimum(score, values[chosen])
        else:
            score = score + values[chosen]
    return selected

# poolforge/embeddings.py

import hashlib
import json
import os
import re
import threading
from pathlib import Path
from typing import Literal, Protocol

import numpy as np

from poolforge.core import Pool
from poolforge.errors import GeometryError
from poolforge.geometry import EmbeddingSet, normalize_rows
from poolforge.log import get_logger

logger = get_logger(__name__)

EmbedderKind = Literal["mock", "fastembed", "huggingface"]

DEFAULT_MODELS = {
    "huggingface": "sentence-transformers/all-mpnet-base-v2",
    "fastembed": "BAAI/bge-small-en-v1.5",
}
MOCK_DIM = 64


class Embedder(Protocol):
    embedder_id: str

    def embed(self, texts: list[str]) -> np.ndarray: ...


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class MockEmbedder:
    """Text -> pseudo-random unit vector seeded from the text hash."""

    def __init__(self, dim: int = MOCK_DIM):
        self.dim = dim
        self.embedder_id = f"mock:{dim}"

    def embed(self, texts: list[str]) -> np.ndarray:
        rows = []
        for text in texts:
            seed = int(text_hash(f"{self.embedder_id}|{text}")[:16], 16)
            rows.append(np.random.default_rng(seed).standard_normal(self.dim))
        return normalize_rows(np.array(rows).reshape(len(texts), self.dim))


class LlamaIndexEmbedder:
    """Wraps a LlamaIndex embedding model (FastEmbed or HuggingFace)."""

    def __init__(self, model, embedder_id: str, batch_size: int = 32):
        self._model = model
        self._lock = threading.Lock()
        self.embedder_id = embedder_id
        self.batch_size = batch_size

    def embed(self, texts: list[str]) -> np.ndarray:
        vectors: list[list[float]] = []
        # local models are not guaranteed thread-safe
        with self._lock:
            for start in range(0, len(texts), self.batch_size):
                vectors.extend(self._model.get_text_embedding_batch(texts[start : start + self.batch_size]))
        return normalize_rows(np.asarray(vectors, dtype=np.float64))


def get_embedder(name: str | None = None, batch_size: int = 32) -> Embedder:
    """
    Returns an embedder from a selection string.

    name:
      - "mock" / "mock:<dim>"            -> MockEmbedder (offline, default dim 64)
      - "huggingface" / "huggingface:<model>" -> HuggingFaceEmbedding
      - "fastembed" / "fastembed:<model>"     -> FastEmbedEmbedding

    If name is None, takes it from env var POOLFORGE_EMBEDDER, default "mock".
    """

    if name is None:
        name = os.getenv("POOLFORGE_EMBEDDER", "mock")

    kind, _, model_name = name.partition(":")

    if kind == "mock":
        try:
            return MockEmbedder(int(model_name) if model_name else MOCK_DIM)
        except ValueError:
            raise ValueError(f"Mock embedder dimension must be an integer: {name}") from None

    elif kind == "fastembed":
        try:
            from llama_index.embeddings.fastembed import FastEmbedEmbedding
        except ImportError as e:

            raise RuntimeError(
                "FastEmbed embedder selected, but fastembed / "
                "llama-index-embeddings-fastembed are not installed or not compatible."
            ) from e

        model_name = model_name or DEFAULT_MODELS["fastembed"]
        return LlamaIndexEmbedder(
            FastEmbedEmbedding(model_name=model_name), f"fastembed:{model_name}", batch_size
        )

    elif kind == "huggingface":
        try:
            from llama_index.embeddings.huggingface import HuggingFaceEmbedding
        except ImportError as e:
            raise RuntimeError(
                "HuggingFace embedder selected, but llama-index-embeddings-huggingface is not installed."
            ) from e

        model_name = model_name or DEFAULT_MODELS["huggingface"]
        return LlamaIndexEmbedder(
            HuggingFaceEmbedding(model_name=model_name), f"huggingface:{model_name}", batch_size
        )

    else:
        raise ValueError(f"Unknown embedder: {name}")


def _slug(embedder_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", embedder_id)


class EmbeddingCache:
    """
    On-disk vectors keyed by (embedder id, text hash).

    Each write adds one shard: `<name>.npy` holds the rows and `<name>.json`
    the sidecar with embedder id, dimension and the text hash of every row.
    """

    def __init__(self, root: str | Path, embedder_id: str):
        self.embedder_id = embedder_id
        self.directory = Path(root) / _slug(embedder_id)
        self.dim: int | None = None
        self._vectors: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self._load()

    def _load(self) -> None:
        if not self.directory.exists():
            return
        for sidecar_path in sorted(self.directory.glob("*.json")):
            sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
            if sidecar["embedder_id"] != self.embedder_id:
                raise GeometryError(
                    f"cache shard {sidecar_path.name} belongs to {sidecar['embedder_id']}, not {self.embedder_id}"
                )
            rows = np.load(sidecar_path.with_suffix(".npy"))
            self._check_dim(int(sidecar["dim"]))
            if rows.shape != (len(sidecar["text_hashes"]), self.dim):
                raise GeometryError(f"cache shard {sidecar_path.name} does not match its sidecar")
            for key, row in zip(sidecar["text_hashes"], rows):
                self._vectors[key] = row

    def _check_dim(self, dim: int) -> None:
        if self.dim is None:
            self.dim = dim
        elif self.dim != dim:
            raise GeometryError(f"dimension mismatch: cache holds {self.dim}, got {dim}")

    def __len__(self) -> int:
        return len(self._vectors)

    def get(self, key: str) -> np.ndarray | None:
        return self._vectors.get(key)

    def put(self, keys: list[str], rows: np.ndarray) -> None:
        if not keys:
            return
        with self._lock:
            self._check_dim(rows.shape[1])
            self.directory.mkdir(parents=True, exist_ok=True)
            name = hashlib.sha256("".join(keys).encode("utf-8")).hexdigest()[:16]
            np.save(self.directory / f"{name}.npy", rows)
            sidecar = {"embedder_id": self.embedder_id, "dim": int(rows.shape[1]), "text_hashes": keys}
            (self.directory / f"{name}.json").write_text(json.dumps(sidecar), encoding="utf-8")
            for key, row in zip(keys, rows):
                self._vectors[key] = row


def embed_texts(texts: list[str], embedder: Embedder, cache: EmbeddingCache | None = None) -> np.ndarray:
    """Unit-normalized rows for texts; only cache misses reach the embedder."""
    keys = [text_hash(t) for t in texts]
    missing: dict[str, str] = {}
    for key, text in zip(keys, texts):
        if (cache is None or cache.get(key) is None) and key not in missing:
            missing[key] = text

    fresh: dict[str, np.ndarray] = {}
    if missing:
        rows = normalize_rows(embedder.embed(list(missing.values())))
        if cache is not None:
            cache.put(list(missing), rows)
        fresh = dict(zip(missing, rows))
        logger.debug("%s: embedded %d new texts", embedder.embedder_id, len(missing))

    vectors = [fresh[k] if k in fresh else cache.get(k) for k in keys]
    if not vectors:
        raise GeometryError("nothing to embed")
    dims = {v.shape[0] for v in vectors}
    if len(dims) != 1:
        raise GeometryError(f"dimension mismatch between cached and fresh vectors: {sorted(dims)}")
    return np.vstack(vectors)


def embed_pool(pool: Pool, embedder: Embedder, cache: EmbeddingCache | None = None) -> EmbeddingSet:
    return EmbeddingSet(embed_texts(pool.texts, embedder, cache), embedder.embedder_id)

"""Task embeddings and the Gaussian similarity kernel."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .datagen import Dataset, Sample, histogram
from .rng import stream


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityConfig:
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise EmbeddingError(f"sigma must be positive, got {self.sigma}")


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise EmbeddingError("cannot normalise a zero vector")
    return v / norm


def cluster_anchor(cluster: int, d_emb: int, seed: int) -> np.ndarray:
    return _unit(stream(seed, "embed.anchor", cluster).standard_normal(d_emb))


def embed_oracle(sample: Sample, jitter: float, seed: int, d_emb: int = 16) -> np.ndarray:
    """Cluster anchor plus isotropic noise of expected norm ``jitter``, renormalised."""
    if getattr(sample, "cluster", None) is None:
        raise EmbeddingError(f"sample {sample.id} carries no cluster metadata")
    anchor = cluster_anchor(sample.cluster, d_emb, seed)
    if jitter == 0:
        return anchor
    noise = stream(seed, "embed.jitter", sample.id).standard_normal(d_emb)
    return _unit(anchor + jitter / np.sqrt(d_emb) * noise)


def histogram_projection(vocab: int, d_emb: int, seed: int) -> np.ndarray:
    """(d_emb, vocab) matrix; column v depends only on (seed, v), not on the vocabulary size."""
    cols = [stream(seed, "embed.histproj", v).standard_normal(d_emb) for v in range(vocab)]
    return np.stack(cols, axis=1) if cols else np.zeros((d_emb, 0))


def embed_histogram(sample: Sample, d_emb: int, seed: int, vocab: int | None = None) -> np.ndarray:
    """Fixed random projection of the token-count histogram (order-free)."""
    tokens = np.asarray(sample.tokens)
    vocab = int(tokens.max()) + 1 if vocab is None else vocab
    proj = histogram_projection(vocab, d_emb, seed)
    return _unit(proj @ histogram(tokens, vocab)[0])


def gaussian_similarity(a: np.ndarray, b: np.ndarray, cfg: SimilarityConfig) -> np.ndarray | float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise EmbeddingError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    d2 = ((a - b) ** 2).sum(axis=-1)
    out = np.exp(-d2 / (2.0 * cfg.sigma**2))
    return float(out) if np.ndim(out) == 0 else out


class EmbeddingTable:
    """Map from sample id to a unit-norm embedding, stored as an id array plus a matrix."""

    def __init__(self, ids, vectors) -> None:
        self.ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            vectors = vectors.reshape(len(self.ids), -1) if len(self.ids) else np.zeros((0, 0))
        if len(vectors) != len(self.ids):
            raise EmbeddingError(f"{len(self.ids)} ids but {len(vectors)} vectors")
        self.vectors = vectors
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise EmbeddingError("duplicate sample ids in embedding table")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, sid: int) -> bool:
        return int(sid) in self._row

    def __getitem__(self, sid: int) -> np.ndarray:
        return self.vectors[self._row[int(sid)]]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and np.array_equal(self.vectors, other.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._row[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise EmbeddingError(f"sample id {exc.args[0]} has no embedding") from None

    def lookup(self, ids) -> np.ndarray:
        return self.vectors[self.rows(ids)]

    def merge(self, other: "EmbeddingTable") -> "EmbeddingTable":
        return EmbeddingTable(np.concatenate([self.ids, other.ids]), np.vstack([self.vectors, other.vectors]))


def embed_dataset(dataset: Dataset, kind: str = "oracle", *, seed: int = 0, d_emb: int = 16,
                  jitter: float = 0.3, vocab: int | None = None) -> EmbeddingTable:
    if kind == "oracle":
        vecs = [embed_oracle(s, jitter, seed, d_emb) for s in dataset]
    elif kind == "histogram":
        vocab = vocab or int(dataset.tokens.max()) + 1
        proj = histogram_projection(vocab, d_emb, seed)
        vecs = list(_unit(histogram(dataset.tokens, vocab) @ proj.T)) if len(dataset) else []
    else:
        raise EmbeddingError(f"unknown embedder {kind!r}")
    return EmbeddingTable(dataset.ids, np.array(vecs).reshape(len(dataset), d_emb))


def median_sigma(table: EmbeddingTable) -> float:
    """Median pairwise Euclidean distance, the default kernel bandwidth."""
    if len(table) < 2:
        return 1.0
    med = float(np.median(pdist(table.vectors)))
    return med if med > 0 else 1.0


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sid, vec in zip(table.ids, table.vectors):
            f.write(json.dumps({"id": int(sid), "vector": [float(x) for x in vec]}) + "\n")


def load_embeddings(path: str | Path) -> EmbeddingTable:
    ids: list[int] = []
    vecs: list[list[float]] = []
    seen: set[int] = set()
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            sid, vec = rec.get("id"), rec.get("vector")
            if not isinstance(sid, int) or not isinstance(vec, list):
                raise EmbeddingError(f"line {lineno}: expected {{id: int, vector: [...]}}")
            if sid in seen:
                raise EmbeddingError(f"line {lineno}: sample id {sid} appears twice")
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise EmbeddingError(f"sample id {sid}: vector has dimension {len(vec)}, expected {dim}")
            seen.add(sid)
            ids.append(sid)
            vecs.append(vec)
    return EmbeddingTable(ids, np.array(vecs, dtype=np.float64).reshape(len(ids), dim or 0))

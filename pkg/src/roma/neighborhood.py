"""Successful set, task-space neighbourhoods and normalised adjacency weights."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .datagen import Dataset
from .embedding import EmbeddingTable, SimilarityConfig
from .moe import Model, TokenSelector, extract_routing, forward, predict
from .rng import stream


class NeighborError(ValueError):
    pass


@dataclass(frozen=True)
class NeighborConfig:
    mode: str = "knn"
    k: int = 3
    eps: float = 0.5
    exclude_self: bool = True

    def __post_init__(self) -> None:
        if self.mode not in ("knn", "eps", "random"):
            raise NeighborError(f"unknown neighbourhood mode {self.mode!r}")
        if self.mode in ("knn", "random") and self.k < 1:
            raise NeighborError("k must be >= 1")
        if self.mode == "eps" and not 0.0 < self.eps < 1.0:
            raise NeighborError("eps must lie in (0, 1)")

    @property
    def name(self) -> str:
        if self.mode == "knn":
            return f"k={self.k}"
        if self.mode == "eps":
            return f"eps={self.eps:g}"
        return "rand"


@dataclass
class NeighborList:
    ids: np.ndarray
    sims: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class NeighborGraph:
    """Per-sample neighbour rows, aligned with ``ids``."""

    ids: np.ndarray
    success: np.ndarray
    neighbors: list[np.ndarray]
    sims: list[np.ndarray]
    weights: list[np.ndarray]
    targets: list[np.ndarray]  # snapshot routing vectors, one (m, n_route) array per row
    layer_set: tuple[int, ...] = ()
    token_selector: TokenSelector = field(default_factory=TokenSelector)

    def row(self, sid: int) -> int:
        return int(np.nonzero(self.ids == sid)[0][0])

    @property
    def mean_neighbors(self) -> float:
        return float(np.mean([len(n) for n in self.neighbors])) if self.neighbors else 0.0


def successful_set(model: Model, dataset: Dataset, batch_size: int = 512) -> np.ndarray:
    """Sorted ids whose argmax prediction matches the label."""
    if len(dataset) == 0:
        return np.zeros(0, dtype=np.int64)
    pred = predict(model, dataset.tokens, batch_size).argmax(axis=1)
    return np.sort(dataset.ids[pred == dataset.labels])


def _candidates(i: int, table: EmbeddingTable, success: np.ndarray, sim_cfg: SimilarityConfig,
                exclude_self: bool = True, success_vecs: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    cand = np.asarray(success, dtype=np.int64)
    vecs = table.lookup(cand) if success_vecs is None else success_vecs
    if exclude_self:
        keep = cand != i
        cand, vecs = cand[keep], vecs[keep]
    if cand.size == 0:
        return cand, np.zeros(0)
    d2 = ((vecs - table[i][None, :]) ** 2).sum(axis=1)
    return cand, np.exp(-d2 / (2.0 * sim_cfg.sigma**2))


def knn_neighbors(i: int, table: EmbeddingTable, success: np.ndarray, cfg: NeighborConfig,
                  sim_cfg: SimilarityConfig, success_vecs: np.ndarray | None = None) -> NeighborList:
    """The k most similar members of S (ties by lower id); fewer when S is small."""
    cand, sims = _candidates(i, table, success, sim_cfg, cfg.exclude_self, success_vecs)
    order = np.lexsort((cand, -sims))[: cfg.k]
    return NeighborList(cand[order], sims[order])


def eps_neighbors(i: int, table: EmbeddingTable, success: np.ndarray, cfg: NeighborConfig,
                  sim_cfg: SimilarityConfig, success_vecs: np.ndarray | None = None) -> NeighborList:
    cand, sims = _candidates(i, table, success, sim_cfg, cfg.exclude_self, success_vecs)
    keep = sims >= cfg.eps
    return NeighborList(cand[keep], sims[keep])


def random_neighbors(i: int, table: EmbeddingTable, success: np.ndarray, cfg: NeighborConfig,
                     sim_cfg: SimilarityConfig, rng: np.random.Generator,
                     success_vecs: np.ndarray | None = None) -> NeighborList:
    """k members of S drawn uniformly without replacement."""
    cand, sims = _candidates(i, table, success, sim_cfg, cfg.exclude_self, success_vecs)
    if cand.size == 0:
        return NeighborList(cand, sims)
    pick = np.sort(rng.choice(cand.size, size=min(cfg.k, cand.size), replace=False))
    return NeighborList(cand[pick], sims[pick])


def adjacency_weights(similarities) -> np.ndarray | None:
    """Similarities normalised to sum to one; None signals an empty neighbourhood."""
    s = np.asarray(similarities, dtype=np.float64).reshape(-1)
    if s.size == 0:
        return None
    if np.any(s <= 0):
        raise NeighborError("similarities must be positive")
    return s / s.sum()


def neighbors_for(i: int, table: EmbeddingTable, success: np.ndarray, cfg: NeighborConfig,
                  sim_cfg: SimilarityConfig, seed: int = 0, epoch: int = 0,
                  success_vecs: np.ndarray | None = None) -> NeighborList:
    if cfg.mode == "knn":
        return knn_neighbors(i, table, success, cfg, sim_cfg, success_vecs)
    if cfg.mode == "eps":
        return eps_neighbors(i, table, success, cfg, sim_cfg, success_vecs)
    rng = stream(seed, "neighbors.random", i, epoch)
    return random_neighbors(i, table, success, cfg, sim_cfg, rng, success_vecs)


def routing_table(model: Model, dataset: Dataset, layer_set: Iterable[int], token_selector: TokenSelector,
                  batch_size: int = 512) -> np.ndarray:
    """Routing vectors of every sample, shape (n, |layers| * E)."""
    layer_set = tuple(layer_set)
    n_route = len(layer_set) * model.config.n_experts
    if len(dataset) == 0:
        return np.zeros((0, n_route))
    chunks = []
    for s in range(0, len(dataset), batch_size):
        tr = forward(model, dataset.tokens[s : s + batch_size])
        chunks.append(extract_routing(tr, layer_set, token_selector).values)
    return np.concatenate(chunks)


def build_graph(model: Model, dataset: Dataset, table: EmbeddingTable, cfg: NeighborConfig,
                sim_cfg: SimilarityConfig, layer_set: Iterable[int], token_selector: TokenSelector,
                seed: int = 0, epoch: int = 0) -> NeighborGraph:
    layer_set = tuple(sorted(layer_set))
    missing = [int(i) for i in dataset.ids if int(i) not in table]
    if missing:
        raise NeighborError(f"sample ids without embeddings: {missing[:5]}")
    success = successful_set(model, dataset)
    routes = routing_table(model, dataset, layer_set, token_selector)
    row_of = {int(sid): r for r, sid in enumerate(dataset.ids)}
    success_vecs = table.lookup(success)
    neighbors, sims, weights, targets = [], [], [], []
    for sid in dataset.ids:
        nl = neighbors_for(int(sid), table, success, cfg, sim_cfg, seed, epoch, success_vecs)
        # underflowed kernels (tiny sigma) carry no weight
        pos = nl.sims > 0
        nl = NeighborList(nl.ids[pos], nl.sims[pos])
        w = adjacency_weights(nl.sims)
        neighbors.append(nl.ids)
        sims.append(nl.sims)
        weights.append(np.zeros(0) if w is None else w)
        targets.append(routes[[row_of[int(j)] for j in nl.ids]] if len(nl) else np.zeros((0, routes.shape[1])))
    return NeighborGraph(dataset.ids.copy(), success, neighbors, sims, weights, targets, layer_set, token_selector)


def dump_graph(graph: NeighborGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sid, nb, w in zip(graph.ids, graph.neighbors, graph.weights):
            f.write(json.dumps({"id": int(sid), "neighbors": [int(j) for j in nb],
                                "weights": [float(x) for x in w]}) + "\n")

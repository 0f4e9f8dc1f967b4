"""Accuracy, routing/task-embedding alignment metrics, manifold dumps and FLOPs parity."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from .datagen import Dataset
from .moe import Model, count_flops, oracle_cost_multiple, predict

DELTA = 1e-12


class ReportError(ValueError):
    pass


@dataclass
class Evaluation:
    accuracy: float
    correct: np.ndarray
    predictions: np.ndarray


def evaluate(model: Model, split: Dataset) -> Evaluation:
    if len(split) == 0:
        raise ReportError("cannot evaluate on an empty split")
    pred = predict(model, split.tokens).argmax(axis=1)
    correct = pred == split.labels
    return Evaluation(float(correct.mean()), correct, pred)


@dataclass(frozen=True)
class AlignmentReport:
    intra_cluster_routing_dist: float
    inter_cluster_routing_dist: float | None
    ratio: float | None
    knn_preservation: float

    def as_dict(self) -> dict:
        return {
            "intra_cluster_routing_dist": self.intra_cluster_routing_dist,
            "inter_cluster_routing_dist": self.inter_cluster_routing_dist,
            "ratio": self.ratio,
            "knn_preservation": self.knn_preservation,
        }


def knn_sets(points: np.ndarray, k: int) -> list[set[int]]:
    """Exact k nearest neighbours (Euclidean, self excluded, ties to lower index)."""
    n = len(points)
    d = squareform(pdist(points)) if n > 1 else np.zeros((n, n))
    out = []
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        order = np.lexsort((others, d[i, others]))[:k]
        out.append(set(others[order].tolist()))
    return out


def alignment_report(routings: np.ndarray, embeddings: np.ndarray, clusters: np.ndarray, k: int = 3) -> AlignmentReport:
    """Within/between-cluster routing distances and embedding-vs-routing kNN overlap."""
    routings = np.asarray(routings, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    clusters = np.asarray(clusters)
    n = len(routings)
    if not (len(embeddings) == n == len(clusters)):
        raise ReportError("routings, embeddings and clusters must be aligned")
    if n < 2:
        raise ReportError("alignment needs at least two samples")
    d = squareform(pdist(routings))
    iu = np.triu_indices(n, 1)
    same = (clusters[:, None] == clusters[None, :])[iu]
    dist = d[iu]
    intra = float(dist[same].mean()) if same.any() else 0.0
    if (~same).any():
        inter = float(dist[~same].mean())
        ratio = intra / (inter + DELTA)
    else:
        inter = ratio = None
    emb_nn = knn_sets(embeddings, k)
    route_nn = knn_sets(routings, k)
    pres = [len(a & b) / len(a) for a, b in zip(emb_nn, route_nn) if a]
    return AlignmentReport(intra, inter, ratio, float(np.mean(pres)) if pres else 0.0)


def dump_manifold(ids: np.ndarray, routings: np.ndarray, embeddings: np.ndarray, clusters: np.ndarray,
                  path: str | Path) -> Path:
    """One CSV row per sample: id, cluster, embedding coordinates, routing coordinates."""
    ids = np.asarray(ids)
    if not (len(ids) == len(routings) == len(embeddings) == len(clusters)):
        raise ReportError("ids, routings, embeddings and clusters differ in length")
    path = Path(path)
    d_emb, d_route = np.shape(embeddings)[1], np.shape(routings)[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "cluster"] + [f"emb_{j}" for j in range(d_emb)] + [f"route_{j}" for j in range(d_route)])
        for i in range(len(ids)):
            w.writerow([int(ids[i]), int(clusters[i])] + [repr(float(x)) for x in embeddings[i]]
                       + [repr(float(x)) for x in routings[i]])
    return path


def load_manifold(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    emb_cols = [j for j, h in enumerate(header) if h.startswith("emb_")]
    route_cols = [j for j, h in enumerate(header) if h.startswith("route_")]
    arr = np.array([[float(x) for x in r] for r in body]) if body else np.zeros((0, len(header)))
    return (arr[:, 0].astype(np.int64), arr[:, route_cols], arr[:, emb_cols], arr[:, 1].astype(np.int64))


def flops_parity(model_before: Model, model_after: Model, oracle_steps: int = 100,
                 backward_factor: float = 2.0) -> dict:
    """Identical architecture means identical per-forward cost."""
    if model_before.config != model_after.config:
        raise ReportError("models have different configurations")
    before = count_flops(model_before.config)
    after = count_flops(model_after.config)
    if before != after:
        raise ReportError(f"FLOP counts differ: {before.total} vs {after.total}")
    return {
        "flops_before": before.as_dict(),
        "flops_after": after.as_dict(),
        "parity": before.total == after.total,
        "oracle_steps": oracle_steps,
        "oracle_cost_multiple": oracle_cost_multiple(oracle_steps, backward_factor),
        "oracle_flops_per_sample": oracle_cost_multiple(oracle_steps, backward_factor) * before.total,
    }

"""Synthetic clustered-task datasets.

Every cluster owns a token distribution (a Dirichlet perturbation of a shared
base measure) and its own labeling rule: a random linear map from the centred
token-count histogram to class scores, read out by argmax. Samples from
different clusters therefore need different computations, which is what gives
experts something to specialise on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import stream

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
# per-token Dirichlet concentration of cluster prototypes around the shared base measure
PROTOTYPE_CONCENTRATION = 1.0
# fraction of each rule's variance that is cluster-specific (the rest is shared)
RULE_SPECIFICITY = 0.5


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    id: int
    tokens: tuple[int, ...]
    label: int
    cluster: int


@dataclass(frozen=True)
class DatasetSpec:
    n_clusters: int = 4
    samples_per_cluster: int = 500
    seq_len: int = 16
    vocab: int = 8
    n_classes: int = 4
    label_noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_clusters", "samples_per_cluster", "seq_len", "vocab", "n_classes"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.label_noise <= 1.0:
            raise DataError(f"label_noise must lie in [0, 1], got {self.label_noise}")
        if self.n_classes > self.vocab:
            raise DataError(
                f"n_classes={self.n_classes} exceeds vocab={self.vocab}: a linear rule on a "
                f"{self.vocab}-bin histogram cannot separate that many classes"
            )


@dataclass
class Dataset:
    """Column-oriented sample store. ``tokens`` has shape (n, seq_len)."""

    ids: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray
    clusters: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            id=int(self.ids[i]),
            tokens=tuple(int(t) for t in self.tokens[i]),
            label=int(self.labels[i]),
            cluster=int(self.clusters[i]),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.clusters, other.clusters)
        )

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.ids[rows], self.tokens[rows], self.labels[rows], self.clusters[rows])

    @classmethod
    def empty(cls, seq_len: int = 0) -> "Dataset":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, np.zeros((0, seq_len), dtype=np.int64), z.copy(), z.copy())

    @classmethod
    def from_samples(cls, samples: list[Sample], seq_len: int = 0) -> "Dataset":
        if not samples:
            return cls.empty(seq_len)
        return cls(
            np.array([s.id for s in samples], dtype=np.int64),
            np.array([s.tokens for s in samples], dtype=np.int64),
            np.array([s.label for s in samples], dtype=np.int64),
            np.array([s.cluster for s in samples], dtype=np.int64),
        )


@dataclass(frozen=True)
class TaskStructure:
    base: np.ndarray  # (V,)
    prototypes: np.ndarray  # (n_clusters, V)
    rules: np.ndarray  # (n_clusters, n_classes, V)


def task_structure(spec: DatasetSpec) -> TaskStructure:
    """Cluster prototypes and labeling rules implied by ``spec``."""
    spec.validate()
    base = stream(spec.seed, "data.base").dirichlet(np.ones(spec.vocab))
    shared = stream(spec.seed, "data.shared_rule").standard_normal((spec.n_classes, spec.vocab))
    protos, rules = [], []
    for c in range(spec.n_clusters):
        rng = stream(spec.seed, "data.cluster", c)
        # floor keeps every token reachable in every cluster
        protos.append(rng.dirichlet(PROTOTYPE_CONCENTRATION * spec.vocab * base + 0.05))
        own = rng.standard_normal((spec.n_classes, spec.vocab))
        rules.append(np.sqrt(1.0 - RULE_SPECIFICITY) * shared + np.sqrt(RULE_SPECIFICITY) * own)
    return TaskStructure(base, np.array(protos), np.array(rules))


def histogram(tokens: np.ndarray, vocab: int) -> np.ndarray:
    tokens = np.atleast_2d(tokens)
    counts = np.zeros((tokens.shape[0], vocab))
    np.add.at(counts, (np.arange(tokens.shape[0])[:, None], tokens), 1.0)
    return counts


def apply_rule(structure: TaskStructure, cluster: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Noise-free label of each row of ``tokens`` under its cluster's rule."""
    cluster = np.atleast_1d(cluster)
    tokens = np.atleast_2d(tokens)
    T = tokens.shape[1]
    centred = histogram(tokens, structure.base.size) - T * structure.prototypes[cluster]
    scores = np.einsum("ncv,nv->nc", structure.rules[cluster], centred)
    return scores.argmax(axis=1)


def _split_counts(n: int) -> tuple[int, int, int]:
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def generate(spec: DatasetSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic (train, val, test) splits, stratified by cluster."""
    structure = task_structure(spec)
    n, T = spec.samples_per_cluster, spec.seq_len
    parts: list[list[Dataset]] = [[], [], []]
    for c in range(spec.n_clusters):
        rng = stream(spec.seed, "data.samples", c)
        tokens = rng.choice(spec.vocab, size=(n, T), p=structure.prototypes[c])
        labels = apply_rule(structure, np.full(n, c), tokens)
        flip = rng.random(n) < spec.label_noise
        if spec.n_classes > 1:
            # shift by 1..C-1 so a flipped label always differs from the clean one
            shift = rng.integers(1, spec.n_classes, size=n)
            labels = np.where(flip, (labels + shift) % spec.n_classes, labels)
        ids = c * n + np.arange(n)
        cluster_ds = Dataset(ids, tokens.astype(np.int64), labels.astype(np.int64), np.full(n, c, dtype=np.int64))
        order = rng.permutation(n)
        n_train, n_val, _ = _split_counts(n)
        bounds = (0, n_train, n_train + n_val, n)
        for k in range(3):
            rows = np.sort(order[bounds[k] : bounds[k + 1]])
            parts[k].append(cluster_ds.subset(rows))
    return tuple(_concat(p, T) for p in parts)  # type: ignore[return-value]


def _concat(parts: list[Dataset], seq_len: int) -> Dataset:
    if not parts:
        return Dataset.empty(seq_len)
    return Dataset(
        np.concatenate([p.ids for p in parts]),
        np.concatenate([p.tokens for p in parts]).reshape(-1, seq_len),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.clusters for p in parts]),
    )


def save_jsonl(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in dataset:
            rec = {"id": s.id, "tokens": list(s.tokens), "label": s.label, "cluster": s.cluster}
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _int_field(rec: dict, key: str, lineno: int) -> int:
    if key not in rec:
        raise DataError(f"line {lineno}: missing field '{key}'")
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise DataError(f"line {lineno}: field '{key}' must be an integer, got {v!r}")
    return v


def load_jsonl(
    path: str | Path,
    vocab: int | None = None,
    seq_len: int | None = None,
    n_classes: int | None = None,
) -> Dataset:
    """Read a dataset written by :func:`save_jsonl`.

    Optional ``vocab``/``seq_len``/``n_classes`` bounds are enforced per line.
    """
    samples: list[Sample] = []
    seen: set[int] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"line {lineno}: expected an object")
            sid = _int_field(rec, "id", lineno)
            label = _int_field(rec, "label", lineno)
            cluster = _int_field(rec, "cluster", lineno)
            tokens = rec.get("tokens")
            if not isinstance(tokens, list) or any(isinstance(t, bool) or not isinstance(t, int) for t in tokens):
                raise DataError(f"line {lineno}: field 'tokens' must be a list of integers")
            if sid in seen:
                raise DataError(f"line {lineno}: field 'id' duplicates id {sid}")
            if seq_len is not None and len(tokens) != seq_len:
                raise DataError(f"line {lineno}: field 'tokens' has length {len(tokens)}, expected {seq_len}")
            if samples and len(tokens) != len(samples[0].tokens):
                raise DataError(f"line {lineno}: field 'tokens' length differs from earlier lines")
            for t in tokens:
                if t < 0 or (vocab is not None and t >= vocab):
                    raise DataError(f"line {lineno}: field 'tokens' holds {t}, outside [0, {vocab})")
            if label < 0 or (n_classes is not None and label >= n_classes):
                raise DataError(f"line {lineno}: field 'label' = {label} out of range")
            if cluster < 0:
                raise DataError(f"line {lineno}: field 'cluster' must be nonnegative")
            seen.add(sid)
            samples.append(Sample(sid, tuple(tokens), label, cluster))
    return Dataset.from_samples(samples, seq_len or 0)


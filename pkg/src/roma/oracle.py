"""Per-sample oracle routing search and the oracle-gap report.

The search runs gradient descent on replacement router logits at the chosen
(layer, token) positions with every model parameter frozen. It starts from the
model's own logits, so step zero is the base routing.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset, Sample
from .moe import (
    Model,
    RoutingOverride,
    RoutingVector,
    TokenSelector,
    backward,
    check_layers,
    extract_routing,
    forward,
    last_layers,
    oracle_cost_multiple,
)
from .regularizer import distill_loss, task_loss

__all__ = [
    "OracleConfig",
    "OracleResult",
    "GapReport",
    "oracle_search",
    "oracle_search_batch",
    "oracle_gap_report",
    "write_gap_report",
    "distill_loss",
]


@dataclass(frozen=True)
class OracleConfig:
    layer_set: tuple[int, ...] | None = None  # None: last five layers
    scope: str = "last"  # "last" token only or "all" tokens
    steps: int = 100
    step_size: float = 0.1
    margin: float = 1.0
    backward_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.scope not in ("last", "all"):
            raise ValueError(f"scope must be 'last' or 'all', got {self.scope!r}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")

    def layers(self, model: Model) -> tuple[int, ...]:
        if self.layer_set is None:
            return last_layers(model.config, 5)
        return check_layers(model.config.n_layers, self.layer_set)

    def positions(self, model: Model) -> list[tuple[int, int]]:
        T = model.config.seq_len
        toks = [T - 1] if self.scope == "last" else list(range(T))
        return [(l, t) for l in self.layers(model) for t in toks]

    @property
    def cost_multiple(self) -> float:
        return oracle_cost_multiple(self.steps, self.backward_factor)


@dataclass
class OracleResult:
    routing: RoutingOverride
    r_star: RoutingVector
    loss_before: float
    loss_after: float
    correct_before: bool
    correct_after: bool
    steps_used: int


@dataclass
class _BatchResult:
    override: dict[tuple[int, int], np.ndarray]
    r_star: RoutingVector
    loss_before: np.ndarray
    loss_after: np.ndarray
    correct_before: np.ndarray
    correct_after: np.ndarray
    steps_used: np.ndarray


def _margin(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    rows = np.arange(len(labels))
    own = logits[rows, labels]
    other = logits.copy()
    other[rows, labels] = -np.inf
    return own - other.max(axis=1)


def oracle_search_batch(model: Model, tokens: np.ndarray, labels: np.ndarray, cfg: OracleConfig,
                        selector: TokenSelector = TokenSelector()) -> _BatchResult:
    """Independent searches for every row of ``tokens``, run in lockstep."""
    tokens = np.atleast_2d(tokens)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B = len(labels)
    positions = cfg.positions(model)
    base = forward(model, tokens)
    z = {(l, t): base.layers[l].logits[:, t, :].copy() for l, t in positions}
    best_z = {k: v.copy() for k, v in z.items()}
    loss_before, _ = task_loss(base.class_logits, labels)
    correct_before = base.class_logits.argmax(axis=1) == labels
    best_loss = loss_before.copy()
    best_correct = correct_before.copy()
    active = np.ones(B, dtype=bool)
    steps_used = np.zeros(B, dtype=np.int64)
    frozen: set[str] = set()

    for it in range(cfg.steps + 1):
        trace = forward(model, tokens, RoutingOverride(z))
        loss, grad = task_loss(trace.class_logits, labels)
        correct = trace.class_logits.argmax(axis=1) == labels
        # admissible iterates never raise the loss above the base; among them
        # a correct one beats an incorrect one, then lower loss wins
        better = active & (loss <= loss_before) & (
            (correct & ~best_correct) | ((correct == best_correct) & (loss < best_loss))
        )
        for k in z:
            best_z[k][better] = z[k][better]
        best_loss = np.where(better, loss, best_loss)
        best_correct = np.where(better, correct, best_correct)
        steps_used[active] = it
        active &= ~(_margin(trace.class_logits, labels) >= cfg.margin)
        if it == cfg.steps or not active.any():
            break
        grad[~active] = 0.0
        g = backward(model, trace, grad, mask=frozen)
        for k in z:
            z[k][active] -= cfg.step_size * g.override[k][active]

    final = forward(model, tokens, RoutingOverride(best_z))
    r_star = extract_routing(final, cfg.layers(model), selector)
    return _BatchResult(best_z, r_star, loss_before, best_loss, correct_before, best_correct, steps_used)


def oracle_search(model: Model, sample: Sample, cfg: OracleConfig = OracleConfig()) -> OracleResult:
    res = oracle_search_batch(model, np.asarray(sample.tokens)[None, :], np.array([sample.label]), cfg)
    return OracleResult(
        routing=RoutingOverride({k: v[0].copy() for k, v in res.override.items()}),
        r_star=RoutingVector(res.r_star.layer_set, res.r_star.token_selector, res.r_star.values[0]),
        loss_before=float(res.loss_before[0]),
        loss_after=float(res.loss_after[0]),
        correct_before=bool(res.correct_before[0]),
        correct_after=bool(res.correct_after[0]),
        steps_used=int(res.steps_used[0]),
    )


def oracle_routing_targets(model: Model, dataset: Dataset, cfg: OracleConfig, layer_set, selector: TokenSelector,
                           batch_size: int = 256) -> np.ndarray:
    """r* for every sample, read at ``layer_set``/``selector`` from the oracle-routed forward pass."""
    out = []
    for s in range(0, len(dataset), batch_size):
        tok, lab = dataset.tokens[s : s + batch_size], dataset.labels[s : s + batch_size]
        res = oracle_search_batch(model, tok, lab, cfg)
        final = forward(model, tok, RoutingOverride(res.override))
        out.append(extract_routing(final, layer_set, selector).values)
    n_route = len(tuple(layer_set)) * model.config.n_experts
    return np.concatenate(out) if out else np.zeros((0, n_route))


@dataclass
class GapReport:
    ids: np.ndarray
    clusters: np.ndarray
    loss_before: np.ndarray
    loss_after: np.ndarray
    correct_before: np.ndarray
    correct_after: np.ndarray
    steps_used: np.ndarray
    cost_multiple: float
    config: dict = field(default_factory=dict)

    @property
    def base_accuracy(self) -> float:
        return float(self.correct_before.mean())

    @property
    def oracle_accuracy(self) -> float:
        return float(self.correct_after.mean())

    @property
    def gap(self) -> float:
        return self.oracle_accuracy - self.base_accuracy

    def summary(self) -> dict:
        q = [0.1, 0.25, 0.5, 0.75, 0.9]
        per_cluster = {}
        for c in np.unique(self.clusters):
            m = self.clusters == c
            per_cluster[str(int(c))] = {
                "n": int(m.sum()),
                "base_accuracy": float(self.correct_before[m].mean()),
                "oracle_accuracy": float(self.correct_after[m].mean()),
                "gap": float(self.correct_after[m].mean() - self.correct_before[m].mean()),
            }
        return {
            "n": int(len(self.ids)),
            "base_accuracy": self.base_accuracy,
            "oracle_accuracy": self.oracle_accuracy,
            "gap": self.gap,
            "loss_before_quantiles": dict(zip(map(str, q), np.quantile(self.loss_before, q).tolist())),
            "loss_after_quantiles": dict(zip(map(str, q), np.quantile(self.loss_after, q).tolist())),
            "mean_steps_used": float(self.steps_used.mean()),
            "cost_multiple": self.cost_multiple,
            "per_cluster": per_cluster,
            "config": self.config,
        }


def oracle_gap_report(model: Model, dataset: Dataset, cfg: OracleConfig = OracleConfig(),
                      batch_size: int = 256) -> GapReport:
    if len(dataset) == 0:
        raise ValueError("oracle gap needs a nonempty dataset")
    parts = []
    for s in range(0, len(dataset), batch_size):
        parts.append(oracle_search_batch(model, dataset.tokens[s : s + batch_size],
                                         dataset.labels[s : s + batch_size], cfg))
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return GapReport(
        ids=dataset.ids.copy(),
        clusters=dataset.clusters.copy(),
        loss_before=cat("loss_before"),
        loss_after=cat("loss_after"),
        correct_before=cat("correct_before"),
        correct_after=cat("correct_after"),
        steps_used=cat("steps_used"),
        cost_multiple=cfg.cost_multiple,
        config={"layer_set": list(cfg.layers(model)), "scope": cfg.scope, "steps": cfg.steps,
                "step_size": cfg.step_size, "margin": cfg.margin},
    )


def write_gap_report(report: GapReport, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "oracle_gap.csv", out_dir / "oracle_gap_summary.json"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "cluster", "loss_before", "loss_after", "correct_before", "correct_after"])
        for row in zip(report.ids, report.clusters, report.loss_before, report.loss_after,
                       report.correct_before, report.correct_after):
            w.writerow([int(row[0]), int(row[1]), repr(float(row[2])), repr(float(row[3])), int(row[4]), int(row[5])])
    json_path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
    return csv_path, json_path

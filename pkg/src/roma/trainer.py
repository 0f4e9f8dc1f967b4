"""Pretraining (all parameters) and router-only finetuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401  (re-exported)
from .datagen import Dataset
from .embedding import EmbeddingTable, SimilarityConfig, median_sigma
from .moe import (
    Model,
    RoutingVector,
    TokenSelector,
    backward,
    check_layers,
    extract_logits,
    extract_routing,
    forward,
    last_layers,
    predict,
    router_params,
)
from .neighborhood import NeighborConfig, NeighborGraph, build_graph
from .oracle import OracleConfig, oracle_routing_targets
from .regularizer import baseline_penalty, combine, distill_loss, manifold_grad, manifold_loss, task_loss
from .rng import stream

log = logging.getLogger(__name__)

METHODS = ("roma", "plain", "oracle_distill", "l1", "l2", "entropy")
LOG_COLUMNS = ("epoch", "step", "task_loss", "manifold_loss", "total", "train_acc", "val_acc", "n_success",
               "mean_neighbors")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    clip_norm: float | None = 1.0  # global gradient-norm cap; None disables


@dataclass(frozen=True)
class TrainConfig:
    method: str = "roma"
    lr: float = 0.05
    lam: float = 1.0
    epochs: int = 10
    batch_size: int = 32
    layer_set: tuple[int, ...] | None = None  # None: last five layers
    token_selector: str = "Last1"
    neighbors: NeighborConfig = field(default_factory=NeighborConfig)
    sigma: float | None = None  # None: median pairwise embedding distance
    trainset_fraction: float = 1.0
    seed: int = 0
    refresh: str = "epoch"  # or "step"
    entropy_sign: float = 1.0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 < self.trainset_fraction <= 1.0:
            raise ValueError("trainset_fraction must lie in (0, 1]")
        if self.refresh not in ("epoch", "step"):
            raise ValueError("refresh must be 'epoch' or 'step'")

    def layers(self, model: Model) -> tuple[int, ...]:
        if self.layer_set is None:
            return last_layers(model.config, 5)
        return check_layers(model.config.n_layers, self.layer_set)

    @property
    def selector(self) -> TokenSelector:
        return TokenSelector.parse(self.token_selector)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(row.get(k)) for k in LOG_COLUMNS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def accuracy(model: Model, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty split is undefined")
    return float((predict(model, dataset.tokens).argmax(axis=1) == dataset.labels).mean())


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Exactly ceil(fraction * n) samples chosen by a seeded shuffle, kept in original order."""
    n = len(dataset)
    m = int(math.ceil(fraction * n - 1e-9))
    if m >= n:
        return dataset
    pick = np.sort(stream(seed, "subsample").permutation(n)[:m])
    return dataset.subset(pick)


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")


def pretrain(model: Model, train: Dataset, config: PretrainConfig = PretrainConfig(),
             val: Dataset | None = None) -> tuple[Model, TrainLog]:
    """Minibatch SGD on the task loss over every parameter."""
    model = model.copy()
    tlog = TrainLog(info={"phase": "pretrain", "n_params": model.n_params()})
    n = len(train)
    step = 0
    for epoch in range(config.epochs):
        order = stream(config.seed, "shuffle.pretrain", epoch).permutation(n)
        for s in range(0, n, config.batch_size):
            rows = order[s : s + config.batch_size]
            trace = forward(model, train.tokens[rows])
            loss, g = task_loss(trace.class_logits, train.labels[rows])
            mean_loss = float(loss.mean())
            _check_finite(mean_loss, epoch, step)
            grads = backward(model, trace, g / len(rows))
            scale = 1.0
            if config.clip_norm is not None:
                norm = np.sqrt(sum(float((gp * gp).sum()) for gp in grads.params.values()))
                if norm > config.clip_norm:
                    scale = config.clip_norm / norm
            for name in sorted(grads.params):
                model.params[name] -= (config.lr * scale) * grads.params[name]
            tlog.rows.append({"epoch": epoch, "step": step, "task_loss": mean_loss, "manifold_loss": 0.0,
                              "total": mean_loss})
            step += 1
        if tlog.rows:
            tlog.rows[-1]["train_acc"] = accuracy(model, train)
            if val is not None and len(val):
                tlog.rows[-1]["val_acc"] = accuracy(model, val)
            log.info("pretrain epoch %d: %s", epoch, {k: tlog.rows[-1].get(k) for k in ("task_loss", "train_acc", "val_acc")})
    return model, tlog


def _regularizer(method: str, cfg: TrainConfig, trace, layers, selector, batch_rows: np.ndarray,
                 graph: NeighborGraph | None, graph_row: dict[int, int] | None, ids: np.ndarray,
                 distill_targets: np.ndarray | None, E: int):
    """Per-sample regulariser values plus gradients on routing (p) and on router logits (z)."""
    B = len(batch_rows)
    rv = extract_routing(trace, layers, selector)
    r = rv.values
    values = np.zeros(B)
    p_grad = np.zeros_like(r)
    z_grad = None
    if method == "roma":
        for b in range(B):
            gi = graph_row[int(ids[b])]
            w = graph.weights[gi]
            if w.size == 0:
                continue
            values[b] = manifold_loss(r[b], graph.targets[gi], w)
            p_grad[b] = manifold_grad(r[b], graph.targets[gi], w)
    elif method == "oracle_distill":
        for b in range(B):
            values[b], p_grad[b] = distill_loss(r[b], distill_targets[batch_rows[b]])
    elif method in ("l2", "entropy"):
        for b in range(B):
            values[b], p_grad[b] = baseline_penalty(method, r[b], E, cfg.entropy_sign)
    elif method == "l1":
        z = extract_logits(trace, layers, selector)
        z_grad = np.zeros_like(z)
        for b in range(B):
            values[b], z_grad[b] = baseline_penalty("l1", z[b])
    return values, p_grad, z_grad, rv


def finetune(model: Model, dataset: Dataset, embeddings: EmbeddingTable | None, config: TrainConfig,
             val: Dataset | None = None, oracle_config: OracleConfig | None = None) -> tuple[Model, TrainLog]:
    """Router-only finetuning of the layers in ``config.layer_set``."""
    model = model.copy()
    cfg = config
    mc = model.config
    layers = cfg.layers(model)
    selector = cfg.selector
    mask = router_params(mc, layers)
    train = subsample(dataset, cfg.trainset_fraction, cfg.seed)
    n = len(train)
    if n == 0:
        raise TrainingError("finetuning needs a nonempty training split")
    method = cfg.method
    lam = 0.0 if method == "plain" else cfg.lam
    needs_graph = method == "roma"

    sim_cfg = None
    if needs_graph:
        if embeddings is None:
            raise TrainingError("method 'roma' needs task embeddings")
        sigma = cfg.sigma if cfg.sigma else median_sigma(EmbeddingTable(train.ids, embeddings.lookup(train.ids)))
        sim_cfg = SimilarityConfig(sigma)

    distill_targets = None
    if method == "oracle_distill":
        ocfg = oracle_config or OracleConfig(layer_set=layers)
        distill_targets = oracle_routing_targets(model, train, ocfg, layers, selector)

    tlog = TrainLog(info={
        "phase": "finetune", "method": method, "lambda": lam, "layer_set": list(layers),
        "token_selector": selector.name, "n_train": n,
        "trainable_params": model.n_params(mask), "total_params": model.n_params(),
        "trainable_fraction": model.n_params(mask) / model.n_params(),
        "sigma": None if sim_cfg is None else sim_cfg.sigma,
    })

    graph, graph_row = None, None

    def refresh(epoch: int) -> None:
        nonlocal graph, graph_row
        graph = build_graph(model, train, embeddings, cfg.neighbors, sim_cfg, layers, selector, cfg.seed, epoch)
        graph_row = {int(sid): r for r, sid in enumerate(graph.ids)}
        if len(graph.success) == 0:
            log.warning("epoch %d: no correctly classified samples, manifold term skipped", epoch)

    step = 0
    for epoch in range(cfg.epochs):
        if needs_graph:
            refresh(epoch)
        order = stream(cfg.seed, "shuffle.finetune", epoch).permutation(n)
        for s in range(0, n, cfg.batch_size):
            if needs_graph and cfg.refresh == "step" and s > 0:
                refresh(epoch)
            rows = order[s : s + cfg.batch_size]
            B = len(rows)
            trace = forward(model, train.tokens[rows])
            task, g_out = task_loss(trace.class_logits, train.labels[rows])
            reg, p_grad, z_grad, rv = _regularizer(method, cfg, trace, layers, selector, rows, graph, graph_row,
                                                   train.ids[rows], distill_targets, mc.n_experts)
            parts = combine(float(task.mean()), float(reg.mean()), lam)
            _check_finite(parts.total, epoch, step)
            routing_grad = logit_grad = None
            if lam != 0.0:
                if z_grad is None:
                    routing_grad = RoutingVector(rv.layer_set, selector, lam * p_grad / B)
                else:
                    logit_grad = RoutingVector(rv.layer_set, selector, lam * z_grad / B)
            grads = backward(model, trace, g_out / B, routing_grad=routing_grad, mask=mask, logit_grad=logit_grad)
            for name in sorted(mask):
                model.params[name] -= cfg.lr * grads.params[name]
            tlog.rows.append({
                "epoch": epoch, "step": step, "task_loss": parts.task, "manifold_loss": parts.manifold,
                "total": parts.total,
                "n_success": None if graph is None else int(len(graph.success)),
                "mean_neighbors": None if graph is None else graph.mean_neighbors,
            })
            step += 1
        if tlog.rows:
            tlog.rows[-1]["train_acc"] = accuracy(model, train)
            if val is not None and len(val):
                tlog.rows[-1]["val_acc"] = accuracy(model, val)
    return model, tlog

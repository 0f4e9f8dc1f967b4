"""Finite-difference check of the analytic router gradients on a tiny model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .moe import Model, ModelConfig, RoutingVector, TokenSelector, backward, extract_routing, forward, init_model
from .regularizer import manifold_grad, manifold_loss, task_loss
from .rng import stream

TINY = ModelConfig(n_layers=2, n_experts=3, top_k=2, d_model=4, d_ff=8, vocab=6, n_classes=3, seq_len=5)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    n_coords: int
    skipped: int
    seconds: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    def as_dict(self) -> dict:
        return {"max_rel_error": self.max_rel_error, "worst": self.worst, "n_coords": self.n_coords,
                "skipped": self.skipped, "seconds": self.seconds, "per_param": self.per_param}


def rel_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _problem(seed: int, batch: int, config: ModelConfig):
    model = init_model(config, seed)
    # spread the router logits so top-K is far from ties under the probe step
    rng = stream(seed, "gradcheck.routers")
    for l in range(config.n_layers):
        model.params[f"router.{l}.weight"] = rng.standard_normal((config.n_experts, config.d_model))
        model.params[f"router.{l}.bias"] = 0.5 * rng.standard_normal(config.n_experts)
    tokens = rng.integers(0, config.vocab, size=(batch, config.seq_len))
    labels = rng.integers(0, config.n_classes, size=batch)
    n_route = config.n_layers * config.n_experts
    n_nb = 3
    targets = rng.dirichlet(np.ones(config.n_experts), size=(batch, n_nb, config.n_layers)).reshape(batch, n_nb, n_route)
    w = rng.random((batch, n_nb)) + 0.1
    weights = w / w.sum(axis=1, keepdims=True)
    return model, tokens, labels, targets, weights


def _loss_and_grads(model: Model, tokens, labels, targets, weights, kind: str, lam: float, mask):
    layers = tuple(range(model.config.n_layers))
    sel = TokenSelector()
    trace = forward(model, tokens)
    task, g_out = task_loss(trace.class_logits, labels)
    r = extract_routing(trace, layers, sel).values
    man = np.array([manifold_loss(r[b], targets[b], weights[b]) for b in range(len(r))])
    if kind == "task":
        value, w_task, w_man = task.sum(), 1.0, 0.0
    elif kind == "manifold":
        value, w_task, w_man = man.sum(), 0.0, 1.0
    else:
        value, w_task, w_man = task.sum() + lam * man.sum(), 1.0, lam
    if mask is None:
        return float(value), trace
    p_grad = np.array([manifold_grad(r[b], targets[b], weights[b]) for b in range(len(r))])
    grads = backward(model, trace, w_task * g_out, routing_grad=RoutingVector(layers, sel, w_man * p_grad), mask=mask)
    return float(value), grads.params


def grad_check(seed: int = 0, eps: float = 1e-5, coords: int = 20, lam: float = 1.0, batch: int = 4,
               config: ModelConfig = TINY, params: list[str] | None = None) -> GradCheckReport:
    """Central differences against the backward pass for task, manifold and combined losses.

    ``coords`` coordinates are probed per parameter tensor (all of them when the
    tensor is smaller). Probes whose step would flip a top-K selection are
    skipped and counted.
    """
    t0 = time.perf_counter()
    model, tokens, labels, targets, weights = _problem(seed, batch, config)
    names = params if params is not None else sorted(
        n for n in model.params if n.startswith("router."))
    pick = stream(seed, "gradcheck.coords")
    probes = {n: pick.permutation(model.params[n].size)[:coords] for n in names}
    base_sel = [lc.selected for lc in forward(model, tokens).layers]

    worst: dict[str, float] = {}
    per_param: dict[str, float] = {}
    skipped = 0
    n_coords = 0
    for kind in ("task", "manifold", "combined"):
        _, analytic = _loss_and_grads(model, tokens, labels, targets, weights, kind, lam, set(names))
        worst[kind] = 0.0
        for name in names:
            for flat in probes[name]:
                idx = np.unravel_index(flat, model.params[name].shape)
                orig = model.params[name][idx]
                vals = []
                stable = True
                for sign in (1.0, -1.0):
                    model.params[name][idx] = orig + sign * eps
                    v, trace = _loss_and_grads(model, tokens, labels, targets, weights, kind, lam, None)
                    stable &= all(np.array_equal(a.selected, b) for a, b in zip(trace.layers, base_sel))
                    vals.append(v)
                model.params[name][idx] = orig
                if not stable:
                    skipped += 1
                    continue
                numeric = (vals[0] - vals[1]) / (2 * eps)
                err = rel_error(float(analytic[name][idx]), numeric)
                worst[kind] = max(worst[kind], err)
                per_param[name] = max(per_param.get(name, 0.0), err)
                n_coords += 1
    return GradCheckReport(worst, n_coords, skipped, time.perf_counter() - t0, per_param)

"""Task loss, routing manifold penalty, and the baseline routing penalties."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    manifold: float
    total: float
    lam: float


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def task_loss(class_logits: np.ndarray, label) -> tuple[np.ndarray | float, np.ndarray]:
    """Cross-entropy at ``label`` and its gradient with respect to the logits.

    Works on a single (C,) logit vector or a batch (B, C) with labels (B,).
    """
    z = np.asarray(class_logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if y.shape[0] != z2.shape[0] or y.min(initial=0) < 0 or y.max(initial=0) >= z2.shape[1]:
        raise LossError("label out of range for the given logits")
    lp = log_softmax(z2)
    rows = np.arange(z2.shape[0])
    loss = -lp[rows, y]
    grad = np.exp(lp)
    grad[rows, y] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def _check(r_i: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r_i = np.asarray(r_i, dtype=np.float64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if targets.shape[1] != r_i.shape[-1]:
        raise LossError(f"routing length mismatch: {r_i.shape[-1]} vs {targets.shape[1]}")
    if weights.size != targets.shape[0]:
        raise LossError(f"{weights.size} weights for {targets.shape[0]} targets")
    return r_i, targets, weights


def manifold_loss(r_i: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> float:
    """sum_j W_ij ||r_i - r_j||^2 over the neighbour targets."""
    r_i, targets, weights = _check(r_i, targets, weights)
    d2 = ((r_i[None, :] - targets) ** 2).sum(axis=1)
    return float(weights @ d2)


def manifold_grad(r_i: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> np.ndarray:
    r_i, targets, weights = _check(r_i, targets, weights)
    return 2.0 * (weights.sum() * r_i - weights @ targets)


def combine(task: float, manifold: float, lam: float) -> LossBreakdown:
    if lam < 0:
        raise LossError(f"regularisation coefficient must be >= 0, got {lam}")
    return LossBreakdown(task=task, manifold=manifold, total=task + lam * manifold, lam=lam)


def baseline_penalty(kind: str, r: np.ndarray, block_size: int | None = None,
                     entropy_sign: float = 1.0) -> tuple[float, np.ndarray]:
    """Generic penalty and its gradient.

    ``l1`` and ``l2`` act elementwise. ``entropy`` sums the Shannon entropy of
    each length-``block_size`` block of a routing vector; ``entropy_sign=-1``
    rewards entropy instead of penalising it.
    """
    r = np.asarray(r, dtype=np.float64)
    if kind == "l1":
        return float(np.abs(r).sum()), np.sign(r)
    if kind == "l2":
        return float((r * r).sum()), 2.0 * r
    if kind == "entropy":
        if not block_size:
            raise LossError("entropy penalty needs the per-layer block size")
        p = np.clip(r, 1e-300, None)
        logp = np.log(p)
        val = -float((r * logp).sum())
        return entropy_sign * val, entropy_sign * -(logp + 1.0)
    raise LossError(f"unknown penalty {kind!r}")


def distill_loss(r: np.ndarray, r_star: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared distance to an oracle routing vector, with gradient."""
    r, r_star = np.asarray(r, dtype=np.float64), np.asarray(r_star, dtype=np.float64)
    if r.shape != r_star.shape:
        raise LossError(f"routing length mismatch: {r.shape} vs {r_star.shape}")
    d = r - r_star
    return float((d * d).sum()), 2.0 * d

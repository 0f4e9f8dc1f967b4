"""Sparse mixture-of-experts classifier with a hand-written backward pass.

Each block first mixes tokens causally (``h_t += M @ mean(h_1..h_t)``) and then
routes every token to its top-K experts::

    z = R @ h_t + b            router logits
    p = softmax(z)             full routing distribution
    S = top-K(p)               ties go to the lower expert index
    h_t += sum_{e in S} p_e / sum_S(p) * FFN_e(h_t)

with ``FFN_e(h) = W2_e @ tanh(W1_e @ h)``. Class logits are read from the last
token. Everything runs in float64; the top-K choice is held constant when
differentiating.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .rng import stream


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    n_experts: int = 8
    top_k: int = 2
    d_model: int = 32
    d_ff: int = 64
    vocab: int = 8
    n_classes: int = 4
    seq_len: int = 16

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if v < 1:
                raise ModelError(f"{k} must be >= 1, got {v}")
        if self.top_k > self.n_experts:
            raise ModelError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_params(self, names: Iterable[str] | None = None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[n].size for n in names))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, E, F = cfg.d_model, cfg.n_experts, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab, D)}
    for l in range(cfg.n_layers):
        shapes[f"mixer.{l}"] = (D, D)
        shapes[f"router.{l}.weight"] = (E, D)
        shapes[f"router.{l}.bias"] = (E,)
        shapes[f"expert.{l}.w1"] = (E, F, D)
        shapes[f"expert.{l}.w2"] = (E, D, F)
    shapes["readout"] = (cfg.n_classes, D)
    return shapes


def router_params(cfg: ModelConfig, layers: Iterable[int] | None = None) -> set[str]:
    layers = range(cfg.n_layers) if layers is None else layers
    out = set()
    for l in layers:
        out.add(f"router.{l}.weight")
        out.add(f"router.{l}.bias")
    return out


def init_model(config: ModelConfig, seed: int) -> Model:
    config.validate()
    D, F = config.d_model, config.d_ff
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        rng = stream(seed, "init", _name_key(name))
        if name == "embed":
            scale = 1.0
        elif name.startswith("mixer"):
            scale = 0.5 / np.sqrt(D)
        elif name.endswith("weight"):
            # near-uniform routing at init
            scale = 0.01 / np.sqrt(D)
        elif name.endswith("bias"):
            scale = 0.0
        elif name.endswith("w1"):
            scale = 1.0 / np.sqrt(D)
        elif name.endswith("w2"):
            scale = 1.0 / np.sqrt(F)
        else:
            scale = 1.0 / np.sqrt(D)
        params[name] = scale * rng.standard_normal(shape)
    return Model(config, params)


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode())


# ---------------------------------------------------------------- routing types


@dataclass(frozen=True)
class TokenSelector:
    """Which token positions a routing vector is read from (averaged blockwise)."""

    where: str = "last"
    n: int = 1

    def __post_init__(self) -> None:
        if self.where not in ("first", "middle", "last"):
            raise ModelError(f"token selector must be first/middle/last, got {self.where!r}")
        if self.n < 1:
            raise ModelError("token selector needs n >= 1")

    def positions(self, seq_len: int) -> list[int]:
        n = min(self.n, seq_len)
        if self.where == "first":
            start = 0
        elif self.where == "last":
            start = seq_len - n
        else:
            start = (seq_len - n) // 2
        return list(range(start, start + n))

    @property
    def name(self) -> str:
        return f"{self.where.capitalize()}{self.n}"

    @classmethod
    def parse(cls, text: str) -> "TokenSelector":
        """Accepts ``Last1``, ``middle-3``, ``first3``."""
        t = text.strip().lower().replace("-", "").replace("_", "")
        for where in ("first", "middle", "last"):
            if t.startswith(where):
                return cls(where, int(t[len(where) :] or 1))
        raise ModelError(f"cannot parse token selector {text!r}")


@dataclass
class RoutingVector:
    """Concatenated per-layer routing distributions; ``values`` is (..., len(layer_set) * E)."""

    layer_set: tuple[int, ...]
    token_selector: TokenSelector
    values: np.ndarray

    def blocks(self) -> np.ndarray:
        E = self.values.shape[-1] // len(self.layer_set)
        return self.values.reshape(*self.values.shape[:-1], len(self.layer_set), E)


@dataclass
class RoutingOverride:
    """Replacement router logits keyed by (layer, token).

    Each value is an (E,) vector shared by the batch or a (B, E) array.
    """

    logits: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def validate(self, cfg: ModelConfig) -> None:
        for (l, t), z in self.logits.items():
            if not (0 <= l < cfg.n_layers and 0 <= t < cfg.seq_len):
                raise ModelError(f"override at (layer={l}, token={t}) is out of range")
            if np.shape(z)[-1] != cfg.n_experts:
                raise ModelError(f"override at ({l}, {t}) has {np.shape(z)[-1]} logits, expected {cfg.n_experts}")


@dataclass
class LayerCache:
    x: np.ndarray  # block input (B, T, D)
    c: np.ndarray  # causal mean (B, T, D)
    u: np.ndarray  # after mixing (B, T, D)
    logits: np.ndarray  # (B, T, E)
    probs: np.ndarray  # (B, T, E)
    selected: np.ndarray  # (B, T, K) expert ids
    gates: np.ndarray  # (B, T, K)
    act: np.ndarray  # tanh activations of the selected experts (B, T, K, F)
    out: np.ndarray  # expert outputs (B, T, K, D)


@dataclass
class ForwardTrace:
    tokens: np.ndarray
    layers: list[LayerCache]
    hidden: np.ndarray  # final hidden states (B, T, D)
    class_logits: np.ndarray  # (B, C)
    overridden: frozenset = frozenset()

    def router_logits(self) -> np.ndarray:
        """(B, L, T, E)"""
        return np.stack([lc.logits for lc in self.layers], axis=1)

    def routing_probs(self) -> np.ndarray:
        """(B, L, T, E)"""
        return np.stack([lc.probs for lc in self.layers], axis=1)


# ---------------------------------------------------------------- forward


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def top_k(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, lower index first on ties."""
    return np.argsort(-p, axis=-1, kind="stable")[..., :k]


def check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
        raise ModelError(f"expected token array of shape (B, {cfg.seq_len}), got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ModelError(f"token id outside [0, {cfg.vocab})")
    return tokens.astype(np.int64)


def _dispatch(sel: np.ndarray, n_experts: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat (token, slot) indices grouped by expert, plus the group boundaries."""
    flat = sel.reshape(-1)
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(n_experts + 1))
    return order, bounds


def forward(model: Model, tokens: np.ndarray, override: RoutingOverride | None = None) -> ForwardTrace:
    cfg = model.config
    tokens = check_tokens(cfg, tokens)
    P = model.params
    B, T = tokens.shape
    K = cfg.top_k
    overrides = {}
    if override is not None and override.logits:
        override.validate(cfg)
        overrides = override.logits
    counts = np.arange(1, T + 1, dtype=np.float64)[None, :, None]

    h = P["embed"][tokens]
    caches = []
    for l in range(cfg.n_layers):
        x = h
        c = np.cumsum(x, axis=1) / counts
        u = x + c @ P[f"mixer.{l}"].T
        z = u @ P[f"router.{l}.weight"].T + P[f"router.{l}.bias"]
        for (ol, ot), zo in overrides.items():
            if ol == l:
                z[:, ot, :] = zo
        p = softmax(z)
        sel = top_k(p, K)
        psel = np.take_along_axis(p, sel, axis=-1)
        gates = psel / psel.sum(axis=-1, keepdims=True)

        w1, w2 = P[f"expert.{l}.w1"], P[f"expert.{l}.w2"]
        order, bounds = _dispatch(sel, cfg.n_experts)
        xin = u.reshape(B * T, -1)[order // K]
        act_s = np.empty((B * T * K, cfg.d_ff))
        out_s = np.empty((B * T * K, cfg.d_model))
        for e in range(cfg.n_experts):
            s, t = bounds[e], bounds[e + 1]
            if s == t:
                continue
            act_s[s:t] = np.tanh(xin[s:t] @ w1[e].T)
            out_s[s:t] = act_s[s:t] @ w2[e].T
        act = np.empty_like(act_s)
        out = np.empty_like(out_s)
        act[order] = act_s
        out[order] = out_s
        act = act.reshape(B, T, K, cfg.d_ff)
        out = out.reshape(B, T, K, cfg.d_model)
        h = u + np.einsum("btk,btkd->btd", gates, out)
        caches.append(LayerCache(x, c, u, z, p, sel, gates, act, out))

    logits = h[:, -1, :] @ P["readout"].T
    return ForwardTrace(tokens, caches, h, logits, frozenset(overrides))


def forward_override(model: Model, tokens: np.ndarray, override: RoutingOverride) -> ForwardTrace:
    return forward(model, tokens, override)


def predict(model: Model, tokens: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Class logits for many sequences, evaluated in chunks."""
    tokens = np.asarray(tokens)
    if len(tokens) == 0:
        return np.zeros((0, model.config.n_classes))
    return np.concatenate(
        [forward(model, tokens[i : i + batch_size]).class_logits for i in range(0, len(tokens), batch_size)]
    )


# ---------------------------------------------------------------- routing extraction


def check_layers(n_layers: int, layer_set: Iterable[int]) -> tuple[int, ...]:
    layers = tuple(sorted(set(int(l) for l in layer_set)))
    if not layers:
        raise ModelError("layer_set must be nonempty")
    for l in layers:
        if not 0 <= l < n_layers:
            raise ModelError(f"layer index {l} out of range for {n_layers} layers")
    return layers


def last_layers(cfg: ModelConfig, n: int = 5) -> tuple[int, ...]:
    return tuple(range(max(0, cfg.n_layers - n), cfg.n_layers))


def extract_routing(
    trace: ForwardTrace,
    layer_set: Iterable[int],
    token_selector: TokenSelector = TokenSelector(),
) -> RoutingVector:
    """Routing vector per sample, shape (B, len(layer_set) * E)."""
    T = trace.tokens.shape[1]
    layers = check_layers(len(trace.layers), layer_set)
    pos = token_selector.positions(T)
    blocks = [trace.layers[l].probs[:, pos, :].mean(axis=1) for l in layers]
    return RoutingVector(layers, token_selector, np.concatenate(blocks, axis=-1))


def extract_logits(trace: ForwardTrace, layer_set: Iterable[int], token_selector: TokenSelector) -> np.ndarray:
    """Router logits laid out like :func:`extract_routing` (selected tokens averaged)."""
    T = trace.tokens.shape[1]
    pos = token_selector.positions(T)
    layers = check_layers(len(trace.layers), layer_set)
    return np.concatenate([trace.layers[l].logits[:, pos, :].mean(axis=1) for l in layers], axis=-1)


def scatter_routing_grad(
    grad: np.ndarray, layer_set: Iterable[int], token_selector: TokenSelector, n_layers: int, seq_len: int
) -> np.ndarray:
    """Adjoint of routing extraction: (B, |layers|*E) -> dense (B, L, T, E)."""
    layers = tuple(sorted(set(layer_set)))
    grad = np.atleast_2d(grad)
    B = grad.shape[0]
    E = grad.shape[1] // len(layers)
    pos = token_selector.positions(seq_len)
    dense = np.zeros((B, n_layers, seq_len, E))
    g = grad.reshape(B, len(layers), E) / len(pos)
    for i, l in enumerate(layers):
        dense[:, l, pos, :] += g[:, i, None, :]
    return dense


# ---------------------------------------------------------------- backward


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    override: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)


def _dense(g, trace: ForwardTrace, cfg: ModelConfig) -> np.ndarray | None:
    if g is None:
        return None
    if isinstance(g, RoutingVector):
        g = scatter_routing_grad(g.values, g.layer_set, g.token_selector, cfg.n_layers, cfg.seq_len)
    g = np.asarray(g, dtype=np.float64)
    shape = (trace.tokens.shape[0], cfg.n_layers, cfg.seq_len, cfg.n_experts)
    if g.shape != shape:
        raise ModelError(f"routing gradient has shape {g.shape}, expected {shape}")
    return g


def _lowest_layer(cfg: ModelConfig, want: set[str], overridden: frozenset) -> int:
    """Deepest layer the backward sweep has to reach; nothing below it is needed."""
    if "embed" in want:
        return 0
    layers = [int(name.split(".")[1]) for name in want if name.count(".") >= 1]
    layers += [l for l, _ in overridden]
    return min(layers) if layers else cfg.n_layers


def backward(
    model: Model,
    trace: ForwardTrace,
    output_grad: np.ndarray,
    routing_grad: RoutingVector | np.ndarray | None = None,
    mask: Iterable[str] | None = None,
    logit_grad: RoutingVector | np.ndarray | None = None,
) -> Gradients:
    """Reverse-mode gradients of the loss implied by the upstream gradients.

    ``output_grad`` is dL/d(class logits), shape (B, C). ``routing_grad`` is
    injected at the full softmax distribution p and ``logit_grad`` at the
    router logits z; either may be a :class:`RoutingVector` of gradients or a
    dense (B, L, T, E) array. Only parameters named in ``mask`` (default: all)
    receive gradients. Gradients for overridden router logits are returned
    in ``Gradients.override``.
    """
    cfg = model.config
    P = model.params
    B, T = trace.tokens.shape
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != (B, cfg.n_classes):
        raise ModelError(f"output_grad has shape {output_grad.shape}, expected {(B, cfg.n_classes)}")
    want = set(P) if mask is None else set(mask)
    unknown = want - set(P)
    if unknown:
        raise ModelError(f"unknown parameters in mask: {sorted(unknown)}")
    dp_ext = _dense(routing_grad, trace, cfg)
    dz_ext = _dense(logit_grad, trace, cfg)
    grads: dict[str, np.ndarray] = {}
    override_grads: dict[tuple[int, int], np.ndarray] = {}

    h_last = trace.hidden[:, -1, :]
    if "readout" in want:
        grads["readout"] = output_grad.T @ h_last
    dh = np.zeros_like(trace.hidden)
    dh[:, -1, :] = output_grad @ P["readout"]

    counts = np.arange(1, T + 1, dtype=np.float64)[None, :, None]
    for l in reversed(range(_lowest_layer(cfg, want, trace.overridden), cfg.n_layers)):
        lc = trace.layers[l]
        du = dh.copy()

        # gates and experts
        dgates = np.einsum("btd,btkd->btk", dh, lc.out)
        dout = lc.gates[..., None] * dh[:, :, None, :]  # (B, T, K, D)
        w1, w2 = P[f"expert.{l}.w1"], P[f"expert.{l}.w2"]
        need_w1, need_w2 = f"expert.{l}.w1" in want, f"expert.{l}.w2" in want
        gw1 = np.zeros_like(w1) if need_w1 else None
        gw2 = np.zeros_like(w2) if need_w2 else None
        K = cfg.top_k
        order, bounds = _dispatch(lc.selected, cfg.n_experts)
        xin = lc.u.reshape(B * T, -1)[order // K]
        g_all = dout.reshape(B * T * K, -1)[order]
        a_all = lc.act.reshape(B * T * K, -1)[order]
        dx_s = np.empty_like(g_all)
        for e in range(cfg.n_experts):
            s, t = bounds[e], bounds[e + 1]
            if s == t:
                continue
            g_out, a = g_all[s:t], a_all[s:t]
            if need_w2:
                gw2[e] = g_out.T @ a
            d_pre = (g_out @ w2[e]) * (1.0 - a * a)
            if need_w1:
                gw1[e] = d_pre.T @ xin[s:t]
            dx_s[s:t] = d_pre @ w1[e]
        dx = np.empty_like(dx_s)
        dx[order] = dx_s
        du += dx.reshape(B, T, K, -1).sum(axis=2)
        if need_w1:
            grads[f"expert.{l}.w1"] = gw1
        if need_w2:
            grads[f"expert.{l}.w2"] = gw2

        # renormalised gates -> full softmax
        psel = np.take_along_axis(lc.probs, lc.selected, axis=-1)
        s = psel.sum(axis=-1, keepdims=True)
        dpsel = (dgates - (dgates * lc.gates).sum(axis=-1, keepdims=True)) / s
        dp = np.zeros_like(lc.probs)
        np.put_along_axis(dp, lc.selected, dpsel, axis=-1)
        if dp_ext is not None:
            dp += dp_ext[:, l]
        dz = lc.probs * (dp - (dp * lc.probs).sum(axis=-1, keepdims=True))
        if dz_ext is not None:
            dz += dz_ext[:, l]
        for ol, ot in trace.overridden:
            if ol == l:
                override_grads[(ol, ot)] = dz[:, ot, :].copy()
                dz[:, ot, :] = 0.0

        R = P[f"router.{l}.weight"]
        if f"router.{l}.weight" in want:
            grads[f"router.{l}.weight"] = np.einsum("bte,btd->ed", dz, lc.u)
        if f"router.{l}.bias" in want:
            grads[f"router.{l}.bias"] = dz.sum(axis=(0, 1))
        du += dz @ R

        # causal token mixing
        M = P[f"mixer.{l}"]
        if f"mixer.{l}" in want:
            grads[f"mixer.{l}"] = np.einsum("bti,btj->ij", du, lc.c)
        dc = du @ M
        dh = du + np.cumsum((dc / counts)[:, ::-1], axis=1)[:, ::-1]

    if "embed" in want:
        g = np.zeros_like(P["embed"])
        np.add.at(g, trace.tokens, dh)
        grads["embed"] = g
    return Gradients(grads, override_grads)


# ---------------------------------------------------------------- flops


@dataclass(frozen=True)
class FlopCount:
    """Multiply-accumulates of one forward pass over one sequence."""

    mixer: int
    router: int
    experts: int
    combine: int
    readout: int

    @property
    def total(self) -> int:
        return self.mixer + self.router + self.experts + self.combine + self.readout

    def as_dict(self) -> dict[str, int]:
        d = asdict(self)
        d["total"] = self.total
        return d


def count_flops(config: ModelConfig, seq_len: int | None = None) -> FlopCount:
    """Only the K active experts per token are counted."""
    config.validate()
    T = config.seq_len if seq_len is None else seq_len
    L, D, E, K, F = config.n_layers, config.d_model, config.n_experts, config.top_k, config.d_ff
    return FlopCount(
        mixer=L * T * D * D,
        router=L * T * E * D,
        experts=L * T * K * 2 * D * F,
        combine=L * T * K * D,
        readout=config.n_classes * D,
    )


def oracle_cost_multiple(steps: int, backward_factor: float = 2.0) -> float:
    """Cost of a gradient-based routing search in units of one forward pass."""
    return (steps + 1) * (1.0 + backward_factor)


def params_fingerprint(params: Mapping[str, np.ndarray], names: Iterable[str] | None = None) -> str:
    h = hashlib.sha256()
    for n in sorted(params if names is None else names):
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n]).tobytes())
    return h.hexdigest()

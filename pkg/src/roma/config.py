"""Run configuration: nested dataclasses, JSON files and dotted-path overrides.

Precedence, lowest first: dataclass defaults, the config file, ``--seed``,
then ``--set key.path=value`` overrides. A top-level ``seed`` fills every
component seed the file leaves unset, so one number drives all sub-streams.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .datagen import DatasetSpec
from .moe import ModelConfig
from .neighborhood import NeighborConfig
from .oracle import OracleConfig
from .trainer import PretrainConfig, TrainConfig

SEEDED = ("data", "pretrain", "finetune", "embedding")

# Manifold weight for the reference run, picked from the sweep {0.1, 0.3, 1, 3, 10}
# on validation accuracy. The library default in TrainConfig stays at 1.0.
REFERENCE_LAMBDA = 0.3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    kind: str = "histogram"  # or "oracle"
    d_emb: int = 16
    jitter: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class AblationConfig:
    grid: str = "full"
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int | None = None  # None: the finetune epochs
    cap: int = 512


@dataclass(frozen=True)
class Paths:
    data: str | None = None  # directory written by gen-data
    checkpoint: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lam=REFERENCE_LAMBDA))
    oracle: OracleConfig = field(default_factory=OracleConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval_split: str = "val"
    paths: Paths = field(default_factory=Paths)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


PRESETS: dict[str, dict] = {
    "reference": {},
    # wider, finer-grained expert pool in the spirit of fine-grained MoE designs
    "deepseek-like": {"model": {"n_layers": 6, "n_experts": 16, "top_k": 4, "d_ff": 32}},
}


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def default_dict() -> dict:
    return RunConfig().to_dict()


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str) -> Any:
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for i, k in enumerate(keys):
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key {'.'.join(keys[: i + 1])!r}")
        if i == len(keys) - 1:
            node[k] = value
        else:
            node = node[k]


def load_config_file(path: str | Path) -> tuple[dict, bool]:
    """Config dict from a plain config file or a run manifest.

    The flag is True when the file is a run manifest, whose config is fully resolved.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    if "resolved_config" in raw and "command" in raw:
        return raw["resolved_config"], True
    return raw, False


def resolve(file_cfg: dict | None = None, seed: int | None = None, overrides: list[tuple[str, Any]] = (),
            preset: str | None = None, resolved: bool = False) -> RunConfig:
    tree = default_dict()
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        tree = _merge(tree, PRESETS[preset])
    file_cfg = file_cfg or {}
    tree = _merge(tree, file_cfg)
    if not resolved and "seed" in file_cfg:
        for part in SEEDED:
            if "seed" not in file_cfg.get(part, {}):
                tree[part]["seed"] = file_cfg["seed"]
    if seed is not None:
        tree["seed"] = seed
        for part in SEEDED:
            tree[part]["seed"] = seed
    for dotted, value in overrides:
        set_path(tree, dotted, value)
    return from_dict(tree)


def _build(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown fields {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def _layers(v, n_layers: int):
    if v is None:
        return None
    if isinstance(v, str):
        from .ablation import parse_layers

        return parse_layers(v, n_layers)
    return tuple(int(x) for x in v)


def from_dict(tree: dict) -> RunConfig:
    tree = copy.deepcopy(tree)
    model = _build(ModelConfig, tree["model"])
    try:
        model.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    data = _build(DatasetSpec, tree["data"])
    try:
        data.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for name in ("vocab", "n_classes", "seq_len"):
        if getattr(data, name) != getattr(model, name):
            raise ConfigError(f"data.{name}={getattr(data, name)} disagrees with model.{name}={getattr(model, name)}")
    ft = dict(tree["finetune"])
    ft["neighbors"] = _build(NeighborConfig, ft.get("neighbors", {}))
    ft["layer_set"] = _layers(ft.get("layer_set"), model.n_layers)
    orc = dict(tree["oracle"])
    orc["layer_set"] = _layers(orc.get("layer_set"), model.n_layers)
    abl = dict(tree["ablation"])
    abl["seeds"] = tuple(int(s) for s in abl.get("seeds", (0,)))
    if tree.get("eval_split") not in ("train", "val", "test"):
        raise ConfigError("eval_split must be train, val or test")
    return RunConfig(
        seed=int(tree["seed"]),
        data=data,
        model=model,
        pretrain=_build(PretrainConfig, tree["pretrain"]),
        finetune=_build(TrainConfig, ft),
        oracle=_build(OracleConfig, orc),
        embedding=_build(EmbeddingConfig, tree["embedding"]),
        ablation=_build(AblationConfig, abl),
        eval_split=tree["eval_split"],
        paths=_build(Paths, tree["paths"]),
    )

"""Checkpoint directory: ``manifest.json`` plus one float32 little-endian blob."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .moe import Model, ModelConfig, param_shapes

FORMAT = "roma-checkpoint/1"
BLOB = "params.bin"
MANIFEST = "manifest.json"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path: str | Path, seed: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    offset = 0
    chunks = []
    for name in param_shapes(model.config):
        arr = np.ascontiguousarray(model.params[name], dtype=_DTYPE)
        tensors[name] = {"shape": list(arr.shape), "offset": offset, "length": int(arr.size)}
        offset += arr.size
        chunks.append(arr.reshape(-1))
    blob = np.concatenate(chunks).tobytes() if chunks else b""
    manifest = {
        "format": FORMAT,
        "config": asdict(model.config),
        "seed": seed,
        "dtype": "float32-le",
        "blob": BLOB,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    _atomic_write(path / BLOB, blob)
    _atomic_write(path / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return path


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read_manifest(path: str | Path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path: str | Path, expect_config: ModelConfig | None = None) -> Model:
    path = Path(path)
    manifest = read_manifest(path)
    config = ModelConfig(**manifest["config"])
    if expect_config is not None and expect_config != config:
        raise CheckpointError(f"checkpoint config {config} does not match expected {expect_config}")
    blob_path = path / manifest.get("blob", BLOB)
    if not blob_path.exists():
        raise FileNotFoundError(f"checkpoint blob missing: {blob_path}")
    data = np.frombuffer(blob_path.read_bytes(), dtype=_DTYPE)
    shapes = param_shapes(config)
    tensors = manifest["tensors"]
    if set(tensors) != set(shapes):
        raise CheckpointError(f"manifest tensors {sorted(set(tensors) ^ set(shapes))} disagree with the config")
    params = {}
    for name, shape in shapes.items():
        entry = tensors[name]
        if tuple(entry["shape"]) != shape:
            raise CheckpointError(f"tensor {name}: manifest shape {entry['shape']} != expected {list(shape)}")
        start, length = int(entry["offset"]), int(entry["length"])
        if length != int(np.prod(shape)):
            raise CheckpointError(f"tensor {name}: length {length} does not match shape {list(shape)}")
        if start + length > data.size:
            raise CheckpointError(
                f"tensor {name}: blob truncated, needs values up to offset {start + length} "
                f"(byte {4 * (start + length)}) but blob holds {data.size} values"
            )
        params[name] = data[start : start + length].astype(np.float64).reshape(shape)
    return Model(config, params)


def checkpoint_hash(path: str | Path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / BLOB).read_bytes())
    return h.hexdigest()

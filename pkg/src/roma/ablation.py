"""Ablation grids over layers, tokens, neighbourhoods, data fractions and regularisers.

Every cell finetunes a fresh copy of the same base checkpoint, so cells are
independent and can run in any order or in parallel.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import checkpoint_hash, load_checkpoint
from .datagen import Dataset
from .embedding import EmbeddingTable
from .evalreport import alignment_report, evaluate
from .moe import count_flops, params_fingerprint
from .neighborhood import NeighborConfig, routing_table
from .oracle import OracleConfig
from .trainer import TrainConfig, finetune

log = logging.getLogger(__name__)

WORKERS_ENV = "ROMA_WORKERS"
DEFAULT_CAP = 512
CSV_COLUMNS = ("cell_id", "grid", "layers", "layer_set", "token_selector", "neighbors", "fraction", "method",
               "seed", "val_acc", "test_acc", "alignment_ratio", "knn_preservation", "flops", "status", "error")


class AblationError(ValueError):
    pass


# ---------------------------------------------------------------- layer notation

_LAYER_TOKEN = re.compile(r"([FML])(\d+)")


def parse_layers(spec: str, n_layers: int) -> tuple[int, ...]:
    """``F2`` first two layers, ``M3`` middle three, ``L5`` last five, ``All``/``All6`` every layer.

    Parts concatenate: ``F2L3`` is the union of F2 and L3. The middle block of
    n layers starts at ``(n_layers - n) // 2``. On shallow models blocks can
    overlap, so the union may hold fewer layers than the name suggests.
    """
    s = spec.strip()
    if s.lower().startswith("all"):
        rest = s[3:]
        if rest and int(rest) != n_layers:
            raise AblationError(f"{spec!r} names {rest} layers but the model has {n_layers}")
        return tuple(range(n_layers))
    parts = _LAYER_TOKEN.findall(s)
    if not parts or "".join(a + b for a, b in parts) != s:
        raise AblationError(f"cannot parse layer set {spec!r}")
    layers: set[int] = set()
    for where, num in parts:
        n = int(num)
        if not 1 <= n <= n_layers:
            raise AblationError(f"{spec!r}: block of {n} layers does not fit {n_layers} layers")
        start = {"F": 0, "M": (n_layers - n) // 2, "L": n_layers - n}[where]
        layers.update(range(start, start + n))
    return tuple(sorted(layers))


# ---------------------------------------------------------------- grids


@dataclass(frozen=True)
class Cell:
    cell_id: str
    grid: str
    overrides: dict = field(default_factory=dict, hash=False, compare=False)
    layers: str = "L5"


@dataclass(frozen=True)
class AblationGrid:
    name: str
    cells: tuple[Cell, ...]
    seeds: tuple[int, ...] = (0, 1, 2)
    cap: int = DEFAULT_CAP

    def __post_init__(self) -> None:
        if not self.seeds:
            raise AblationError("an ablation grid needs at least one seed")
        ids = [c.cell_id for c in self.cells]
        if len(set(ids)) != len(ids):
            raise AblationError("duplicate cell ids in grid")
        if len(self.cells) * len(self.seeds) > self.cap:
            raise AblationError(
                f"grid {self.name!r} has {len(self.cells)} cells x {len(self.seeds)} seeds, above the cap {self.cap}")

    def __len__(self) -> int:
        return len(self.cells)


LAYER_SETS = ("F1", "M1", "L1", "F1M1", "F1L1", "M1L1", "F2", "M2", "L2",
              "F2M3", "F2L3", "M2L3", "F5", "M5", "All", "L5")
TOKEN_SELECTORS = ("First3", "Middle3", "Last3", "First1", "Middle1", "Last1")
NEIGHBOR_CONFIGS = (
    NeighborConfig(mode="random", k=3),
    NeighborConfig(mode="eps", eps=0.3),
    NeighborConfig(mode="eps", eps=0.5),
    NeighborConfig(mode="eps", eps=0.7),
    NeighborConfig(mode="knn", k=1),
    NeighborConfig(mode="knn", k=3),
    NeighborConfig(mode="knn", k=5),
)
FRACTIONS = (0.1, 0.3, 0.5, 0.7, 1.0)
REGULARIZERS = ("l1", "l2", "entropy", "roma")
METHODS = ("plain", "oracle_distill", "roma")


def layer_cells(n_layers: int) -> list[Cell]:
    out = []
    for name in LAYER_SETS:
        label = f"All{n_layers}" if name == "All" else name
        out.append(Cell(f"layers={label}", "layers", {"layer_set": parse_layers(name, n_layers)}, layers=label))
    return out


def token_cells() -> list[Cell]:
    return [Cell(f"tokens={t}", "tokens", {"token_selector": t}) for t in TOKEN_SELECTORS]


def neighbor_cells() -> list[Cell]:
    return [Cell(f"neighbors={nc.name}", "neighbors", {"neighbors": nc}) for nc in NEIGHBOR_CONFIGS]


def fraction_cells() -> list[Cell]:
    return [Cell(f"fraction={f:g}", "fractions", {"trainset_fraction": f}) for f in FRACTIONS]


def regularizer_cells() -> list[Cell]:
    return [Cell(f"regularizer={m}", "regularizers", {"method": m}) for m in REGULARIZERS]


def method_cells() -> list[Cell]:
    return [Cell(f"method={m}", "methods", {"method": m}) for m in METHODS]


GRID_NAMES = ("layers", "tokens", "neighbors", "fractions", "regularizers", "methods", "full")


def make_grid(name: str, n_layers: int, seeds=(0, 1, 2), cap: int = DEFAULT_CAP) -> AblationGrid:
    """Named grid; ``full`` is every axis grid except ``methods``."""
    builders = {
        "layers": lambda: layer_cells(n_layers),
        "tokens": token_cells,
        "neighbors": neighbor_cells,
        "fractions": fraction_cells,
        "regularizers": regularizer_cells,
        "methods": method_cells,
    }
    if name == "full":
        cells = [c for g in ("layers", "tokens", "neighbors", "fractions", "regularizers") for c in builders[g]()]
    elif name in builders:
        cells = builders[name]()
    else:
        raise AblationError(f"unknown grid {name!r}; expected one of {GRID_NAMES}")
    return AblationGrid(name, tuple(cells), tuple(seeds), cap)


# ---------------------------------------------------------------- runner


@dataclass
class AblationResult:
    rows: list[dict]
    summary: dict
    csv_path: Path | None = None
    summary_path: Path | None = None

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.rows if r["status"] != "ok"]


@dataclass
class _Job:
    cell: Cell
    seed: int
    base_config: TrainConfig
    checkpoint: str
    expected_hash: str
    train: Dataset
    val: Dataset
    test: Dataset
    embeddings: EmbeddingTable
    oracle_config: OracleConfig | None
    out_dir: str | None


def _describe(cell: Cell, cfg: TrainConfig, n_layers: int) -> dict:
    layers = cfg.layer_set if cfg.layer_set is not None else tuple(range(max(0, n_layers - 5), n_layers))
    return {
        "cell_id": cell.cell_id,
        "grid": cell.grid,
        "layers": cell.layers if cell.grid == "layers" else "",
        "layer_set": " ".join(str(l) for l in layers),
        "token_selector": cfg.token_selector,
        "neighbors": cfg.neighbors.name,
        "fraction": cfg.trainset_fraction,
        "method": cfg.method,
    }


def run_cell(job: _Job) -> dict:
    row = {"seed": job.seed, "status": "ok", "error": ""}
    try:
        cfg = replace(job.base_config, seed=job.seed, **job.cell.overrides)
        if checkpoint_hash(job.checkpoint) != job.expected_hash:
            raise AblationError("base checkpoint changed during the grid")
        model = load_checkpoint(job.checkpoint)
        row.update(_describe(job.cell, cfg, model.config.n_layers))
        base_fp = params_fingerprint(model.params)
        tuned, tlog = finetune(model, job.train, job.embeddings, cfg, val=job.val, oracle_config=job.oracle_config)
        if params_fingerprint(model.params) != base_fp:
            raise AblationError("finetune mutated the shared base model")
        layers = cfg.layers(tuned)
        routes = routing_table(tuned, job.val, layers, cfg.selector)
        align = alignment_report(routes, job.embeddings.lookup(job.val.ids), job.val.clusters)
        row.update({
            "val_acc": evaluate(tuned, job.val).accuracy,
            "test_acc": evaluate(tuned, job.test).accuracy if len(job.test) else None,
            "alignment_ratio": align.ratio,
            "knn_preservation": align.knn_preservation,
            "flops": count_flops(tuned.config).total,
        })
        if job.out_dir:
            cell_dir = Path(job.out_dir) / "cells" / _slug(job.cell.cell_id) / f"seed{job.seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            tlog.write_csv(cell_dir / "train_log.csv")
            (cell_dir / "result.json").write_text(json.dumps(row, indent=2, sort_keys=True, default=_jsonable))
    except Exception as exc:  # a failed cell is recorded, the grid carries on
        row.setdefault("cell_id", job.cell.cell_id)
        row.setdefault("grid", job.cell.grid)
        row.update({"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
        log.error("cell %s seed %d failed:\n%s", job.cell.cell_id, job.seed, traceback.format_exc())
    return row


def _slug(cell_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "_", cell_id)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, (tuple, set)):
        return list(v)
    raise TypeError(f"not serialisable: {type(v)}")


def workers_from_env(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return default
    n = int(raw)
    if n < 1:
        raise AblationError(f"{WORKERS_ENV} must be >= 1")
    return n


def run_ablation(grid: AblationGrid, base_checkpoint: str | Path, train: Dataset, val: Dataset, test: Dataset,
                 embeddings: EmbeddingTable, base_config: TrainConfig = TrainConfig(),
                 out_dir: str | Path | None = None, workers: int | None = None,
                 oracle_config: OracleConfig | None = None) -> AblationResult:
    """Finetune every (cell, seed) from ``base_checkpoint`` and tabulate the results."""
    base_checkpoint = str(base_checkpoint)
    expected = checkpoint_hash(base_checkpoint)
    out = str(out_dir) if out_dir is not None else None
    jobs = [_Job(c, s, base_config, base_checkpoint, expected, train, val, test, embeddings, oracle_config, out)
            for c in grid.cells for s in grid.seeds]
    workers = workers if workers is not None else workers_from_env()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, jobs))
    else:
        rows = [run_cell(j) for j in jobs]
    summary = summarize(grid, rows, expected)
    result = AblationResult(rows, summary)
    if out is not None:
        result.csv_path, result.summary_path = write_ablation(result, out)
    return result


def summarize(grid: AblationGrid, rows: list[dict], base_hash: str) -> dict:
    cells = {}
    for cell in grid.cells:
        mine = [r for r in rows if r["cell_id"] == cell.cell_id]
        ok = [r for r in mine if r["status"] == "ok"]
        entry = {"grid": cell.grid, "n_seeds": len(mine), "n_failed": len(mine) - len(ok)}
        for metric in ("val_acc", "test_acc", "alignment_ratio", "knn_preservation"):
            vals = [r[metric] for r in ok if r.get(metric) is not None]
            entry[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
            entry[f"{metric}_std"] = float(np.std(vals)) if vals else None
        cells[cell.cell_id] = entry
    return {"grid": grid.name, "seeds": list(grid.seeds), "base_checkpoint_sha256": base_hash,
            "n_cells": len(grid.cells), "n_failed": sum(r["status"] != "ok" for r in rows), "cells": cells}


def write_ablation(result: AblationResult, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "ablation.csv", out_dir / "ablation_summary.json"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in result.rows:
            w.writerow({k: _cell(row.get(k)) for k in CSV_COLUMNS})
    json_path.write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    return csv_path, json_path


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def read_ablation_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))

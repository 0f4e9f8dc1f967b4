"""``roma`` command line: one subcommand per workflow, each leaving a run manifest.

Exit codes: 0 success, 1 other failure, 2 bad usage, 3 missing input file,
4 config or checkpoint mismatch, 5 malformed data.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import AblationError, make_grid, run_ablation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config_file, parse_value, resolve
from .datagen import DataError, Dataset, generate, load_jsonl, save_jsonl
from .embedding import EmbeddingError, EmbeddingTable, embed_dataset, load_embeddings, save_embeddings
from .evalreport import alignment_report, dump_manifold, evaluate, flops_parity
from .gradcheck import grad_check
from .moe import init_model
from .neighborhood import routing_table
from .oracle import oracle_gap_report, write_gap_report
from .trainer import finetune, pretrain

log = logging.getLogger("roma")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_MISSING, EXIT_MISMATCH, EXIT_DATA = 0, 1, 2, 3, 4, 5
MANIFEST_NAME = "run_manifest.json"
GRAD_TOLERANCE = 1e-4
COMMANDS = ("gen-data", "pretrain", "oracle-gap", "finetune", "eval", "dump-manifold", "ablate", "grad-check")


class InputMissing(FileNotFoundError):
    pass


# ---------------------------------------------------------------- helpers


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def output_hashes(out: Path) -> dict[str, str]:
    """sha256 of every file under ``out`` except the run manifest."""
    return {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != MANIFEST_NAME and not p.name.endswith(".tmp")}


def write_manifest(out: Path, command: str, cfg: RunConfig, argv: list[str], seconds: float) -> Path:
    manifest = {
        "command": command,
        "resolved_config": cfg.to_dict(),
        "seed": cfg.seed,
        "argv": argv,
        "artifacts": output_hashes(out),
        "version": __version__,
        "duration_seconds": seconds,
    }
    path = out / MANIFEST_NAME
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _splits(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset, EmbeddingTable]:
    """Splits and task embeddings, from ``paths.data`` or regenerated from the config."""
    m = cfg.model
    if cfg.paths.data is None:
        train, val, test = generate(cfg.data)
        emb = _embed(cfg, train, val, test)
        return train, val, test, emb
    d = Path(cfg.paths.data)
    if not d.is_dir():
        raise InputMissing(f"data directory not found: {d}")
    parts = []
    for name in ("train", "val", "test"):
        f = d / f"{name}.jsonl"
        if not f.exists():
            raise InputMissing(f"missing split file {f}")
        parts.append(load_jsonl(f, vocab=m.vocab, seq_len=m.seq_len, n_classes=m.n_classes))
    f = d / "embeddings.jsonl"
    emb = load_embeddings(f) if f.exists() else _embed(cfg, *parts)
    for p in parts:
        missing = [int(i) for i in p.ids if i not in emb]
        if missing:
            raise EmbeddingError(f"no task embedding for sample ids {missing[:5]}")
    return parts[0], parts[1], parts[2], emb


def _embed(cfg: RunConfig, *parts: Dataset) -> EmbeddingTable:
    e = cfg.embedding
    tables = [embed_dataset(p, e.kind, seed=e.seed, d_emb=e.d_emb, jitter=e.jitter, vocab=cfg.data.vocab)
              for p in parts]
    out = tables[0]
    for t in tables[1:]:
        out = out.merge(t)
    return out


def _checkpoint(cfg: RunConfig):
    if cfg.paths.checkpoint is None:
        raise InputMissing("this command needs a checkpoint (--checkpoint DIR)")
    path = Path(cfg.paths.checkpoint)
    if not (path / "manifest.json").exists():
        raise InputMissing(f"no checkpoint at {path}")
    return load_checkpoint(path, expect_config=cfg.model)


def _split(cfg: RunConfig, train, val, test) -> Dataset:
    return {"train": train, "val": val, "test": test}[cfg.eval_split]


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    train, val, test = generate(cfg.data)
    for name, ds in (("train", train), ("val", val), ("test", test)):
        save_jsonl(ds, out / f"{name}.jsonl")
    save_embeddings(_embed(cfg, train, val, test), out / "embeddings.jsonl")
    log.info("wrote %d/%d/%d samples to %s", len(train), len(val), len(test), out)
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, out: Path) -> int:
    train, val, _, _ = _splits(cfg)
    model = init_model(cfg.model, cfg.pretrain.seed)
    model, tlog = pretrain(model, train, cfg.pretrain, val)
    save_checkpoint(model, out / "checkpoint", seed=cfg.pretrain.seed)
    tlog.write_csv(out / "train_log.csv")
    metrics = {"train_acc": evaluate(model, train).accuracy, "val_acc": evaluate(model, val).accuracy}
    _dump(out / "metrics.json", metrics)
    log.info("pretrain done: %s", metrics)
    return EXIT_OK


def cmd_oracle_gap(cfg: RunConfig, out: Path) -> int:
    splits = _splits(cfg)
    model = _checkpoint(cfg)
    report = oracle_gap_report(model, _split(cfg, *splits[:3]), cfg.oracle)
    write_gap_report(report, out)
    log.info("oracle gap on %s: base %.4f oracle %.4f gap %.4f", cfg.eval_split, report.base_accuracy,
             report.oracle_accuracy, report.gap)
    return EXIT_OK


def _alignment(model, ds: Dataset, emb: EmbeddingTable, cfg: RunConfig) -> dict:
    layers = cfg.finetune.layers(model)
    routes = routing_table(model, ds, layers, cfg.finetune.selector)
    return alignment_report(routes, emb.lookup(ds.ids), ds.clusters).as_dict()


def cmd_finetune(cfg: RunConfig, out: Path) -> int:
    train, val, test, emb = _splits(cfg)
    base = _checkpoint(cfg)
    tuned, tlog = finetune(base, train, emb, cfg.finetune, val=val, oracle_config=cfg.oracle)
    save_checkpoint(tuned, out / "checkpoint", seed=cfg.finetune.seed)
    tlog.write_csv(out / "train_log.csv")
    held = _split(cfg, train, val, test)
    metrics = {
        "method": cfg.finetune.method,
        "lambda": tlog.info["lambda"],
        "trainable_fraction": tlog.info["trainable_fraction"],
        "accuracy_before": evaluate(base, held).accuracy,
        "accuracy_after": evaluate(tuned, held).accuracy,
        "alignment_before": _alignment(base, held, emb, cfg),
        "alignment_after": _alignment(tuned, held, emb, cfg),
        "flops": flops_parity(base, tuned, cfg.oracle.steps, cfg.oracle.backward_factor),
        "eval_split": cfg.eval_split,
    }
    _dump(out / "metrics.json", metrics)
    log.info("finetune %s: %s accuracy %.4f -> %.4f", cfg.finetune.method, cfg.eval_split,
             metrics["accuracy_before"], metrics["accuracy_after"])
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    train, val, test, emb = _splits(cfg)
    model = _checkpoint(cfg)
    result = {name: evaluate(model, ds).accuracy for name, ds in (("train", train), ("val", val), ("test", test))
              if len(ds)}
    result["alignment"] = _alignment(model, _split(cfg, train, val, test), emb, cfg)
    result["eval_split"] = cfg.eval_split
    _dump(out / "eval.json", result)
    log.info("eval: %s", {k: v for k, v in result.items() if k in ("train", "val", "test")})
    return EXIT_OK


def cmd_dump_manifold(cfg: RunConfig, out: Path) -> int:
    train, val, test, emb = _splits(cfg)
    model = _checkpoint(cfg)
    ds = _split(cfg, train, val, test)
    routes = routing_table(model, ds, cfg.finetune.layers(model), cfg.finetune.selector)
    dump_manifold(ds.ids, routes, emb.lookup(ds.ids), ds.clusters, out / "manifold.csv")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    train, val, test, emb = _splits(cfg)
    _checkpoint(cfg)  # validates presence and config before any cell runs
    a = cfg.ablation
    grid = make_grid(a.grid, cfg.model.n_layers, a.seeds, a.cap)
    base_cfg = cfg.finetune if a.epochs is None else replace(cfg.finetune, epochs=a.epochs)
    result = run_ablation(grid, cfg.paths.checkpoint, train, val, test, emb, base_cfg, out_dir=out,
                          oracle_config=cfg.oracle)
    log.info("ablation %s: %d rows, %d failed", grid.name, len(result.rows), len(result.failed))
    return EXIT_OK if not result.failed else EXIT_OTHER


def cmd_grad_check(cfg: RunConfig, out: Path) -> int:
    report = grad_check(seed=cfg.seed)
    body = report.as_dict()
    body["tolerance"] = GRAD_TOLERANCE
    body["passed"] = report.worst < GRAD_TOLERANCE
    body.pop("seconds")  # wall time would break output determinism
    _dump(out / "grad_check.json", body)
    log.info("grad-check: max relative error %.3e over %d coordinates (%s)", report.worst, report.n_coords,
             "ok" if body["passed"] else "FAILED")
    return EXIT_OK if body["passed"] else EXIT_OTHER


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "oracle-gap": cmd_oracle_gap,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "dump-manifold": cmd_dump_manifold,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roma", description="Routing manifold alignment on a desk-scale MoE.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file or a run manifest to replay")
        p.add_argument("--seed", type=int, help="top-level seed for every sub-stream")
        p.add_argument("--out", help="output directory (default runs/<command>)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field by dotted path, e.g. finetune.lam=0.1")
        p.add_argument("--preset", help="named model preset (reference, deepseek-like)")
        p.add_argument("--data", help="data directory written by gen-data")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("oracle-gap", "finetune", "eval", "dump-manifold", "ablate"):
            p.add_argument("--checkpoint", help="checkpoint directory")
        if name in ("finetune", "ablate"):
            p.add_argument("--method", help="roma, plain, oracle_distill, l1, l2 or entropy")
            p.add_argument("--lambda", dest="lam", type=float, help="regulariser weight")
        if name == "ablate":
            p.add_argument("--grid", help="layers, tokens, neighbors, fractions, regularizers, methods or full")
    return parser


def _overrides(args) -> list[tuple[str, object]]:
    out = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k.strip(), parse_value(v)))
    direct = {"paths.data": args.data, "paths.checkpoint": getattr(args, "checkpoint", None),
              "finetune.method": getattr(args, "method", None), "finetune.lam": getattr(args, "lam", None),
              "ablation.grid": getattr(args, "grid", None)}
    for k, v in direct.items():
        if v is not None:
            if k.startswith("paths."):
                v = str(Path(v).resolve())
            out.append((k, v))
    return out


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit with 2, --help/--version with 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        file_cfg, resolved = load_config_file(args.config) if args.config else ({}, False)
        cfg = resolve(file_cfg, seed=args.seed, overrides=_overrides(args), preset=args.preset, resolved=resolved)
        out = Path(args.out or Path("runs") / args.command)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        code = HANDLERS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, argv, time.perf_counter() - t0)
        return code
    except FileNotFoundError as exc:
        log.error("missing input: %s", exc)
        return EXIT_MISSING
    except (ConfigError, CheckpointError, AblationError) as exc:
        log.error("config mismatch: %s", exc)
        return EXIT_MISMATCH
    except (DataError, EmbeddingError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except Exception as exc:
        log.exception("failed: %s", exc)
        return EXIT_OTHER


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

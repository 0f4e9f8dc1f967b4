import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from roma.ablation import (
    CSV_COLUMNS,
    FRACTIONS,
    LAYER_SETS,
    NEIGHBOR_CONFIGS,
    REGULARIZERS,
    TOKEN_SELECTORS,
    AblationError,
    AblationGrid,
    Cell,
    make_grid,
    parse_layers,
    read_ablation_csv,
    run_ablation,
)
from roma.checkpoint import checkpoint_hash, save_checkpoint
from roma.trainer import TrainConfig

QUICK = TrainConfig(epochs=1, batch_size=32, lr=0.1)


@pytest.mark.parametrize("spec,expected", [
    ("F1", (0,)), ("M1", (2,)), ("L1", (5,)),
    ("F1M1", (0, 2)), ("F1L1", (0, 5)), ("M1L1", (2, 5)),
    ("F2", (0, 1)), ("M2", (2, 3)), ("L2", (4, 5)),
    ("F2M3", (0, 1, 2, 3)), ("F2L3", (0, 1, 3, 4, 5)), ("M2L3", (2, 3, 4, 5)),
    ("F5", (0, 1, 2, 3, 4)), ("M5", (0, 1, 2, 3, 4)), ("L5", (1, 2, 3, 4, 5)),
    ("All", (0, 1, 2, 3, 4, 5)), ("All6", (0, 1, 2, 3, 4, 5)),
])
def test_parse_layers_six(spec, expected):
    assert parse_layers(spec, 6) == expected


@pytest.mark.parametrize("bad", ["", "X2", "F0", "F7", "F2x", "All5", "2F"])
def test_parse_layers_rejects(bad):
    with pytest.raises(AblationError):
        parse_layers(bad, 6)


@given(st.integers(1, 12), st.sampled_from("FML"), st.data())
def test_parse_layers_block_is_contiguous(n_layers, where, data):
    n = data.draw(st.integers(1, n_layers))
    got = parse_layers(f"{where}{n}", n_layers)
    assert len(got) == n
    assert list(got) == list(range(got[0], got[0] + n))
    assert 0 <= got[0] and got[-1] < n_layers


def test_grid_axes():
    assert [c.layers for c in make_grid("layers", 6).cells][-2:] == ["All6", "L5"]
    assert len(make_grid("layers", 6)) == len(LAYER_SETS) == 16
    assert [c.overrides["token_selector"] for c in make_grid("tokens", 6).cells] == list(TOKEN_SELECTORS)
    assert [c.overrides["neighbors"] for c in make_grid("neighbors", 6).cells] == list(NEIGHBOR_CONFIGS)
    assert [c.overrides["trainset_fraction"] for c in make_grid("fractions", 6).cells] == list(FRACTIONS)
    assert [c.overrides["method"] for c in make_grid("regularizers", 6).cells] == list(REGULARIZERS)
    assert len(make_grid("full", 6)) == 16 + 6 + 7 + 5 + 4
    with pytest.raises(AblationError):
        make_grid("everything", 6)


def test_grid_cap_and_duplicates():
    with pytest.raises(AblationError, match="cap"):
        make_grid("full", 6, seeds=range(20), cap=512)
    c = Cell("a", "x")
    with pytest.raises(AblationError):
        AblationGrid("g", (c, c))
    with pytest.raises(AblationError):
        AblationGrid("g", (c,), seeds=())


@pytest.fixture
def base_ckpt(small_model, tmp_path):
    return save_checkpoint(small_model, tmp_path / "base")


def _run(grid, ckpt, splits, emb, **kw):
    tr, va, te = splits
    return run_ablation(grid, ckpt, tr, va, te, emb, QUICK, **kw)


def test_one_cell_grid_writes_outputs(base_ckpt, small_splits, small_embeddings, tmp_path):
    grid = AblationGrid("one", (Cell("tokens=Last3", "tokens", {"token_selector": "Last3"}),), seeds=(0, 1))
    res = _run(grid, base_ckpt, small_splits, small_embeddings, out_dir=tmp_path / "out")
    assert not res.failed
    rows = read_ablation_csv(res.csv_path)
    assert len(rows) == 2 and list(rows[0]) == list(CSV_COLUMNS)
    assert {r["seed"] for r in rows} == {"0", "1"}
    assert all(r["status"] == "ok" and r["token_selector"] == "Last3" for r in rows)
    summary = json.loads(res.summary_path.read_text())
    entry = summary["cells"]["tokens=Last3"]
    accs = [float(r["val_acc"]) for r in rows]
    assert entry["val_acc_mean"] == pytest.approx(np.mean(accs))
    assert entry["val_acc_std"] == pytest.approx(np.std(accs))
    assert summary["base_checkpoint_sha256"] == checkpoint_hash(base_ckpt)
    for seed in (0, 1):
        cell_dir = tmp_path / "out" / "cells" / "tokens_Last3" / f"seed{seed}"
        assert (cell_dir / "train_log.csv").exists() and (cell_dir / "result.json").exists()


def test_cells_are_order_independent(base_ckpt, small_splits, small_embeddings):
    cells = (Cell("fraction=0.5", "fractions", {"trainset_fraction": 0.5}),
             Cell("regularizer=l2", "regularizers", {"method": "l2"}))
    a = _run(AblationGrid("g", cells, seeds=(0,)), base_ckpt, small_splits, small_embeddings)
    b = _run(AblationGrid("g", cells[::-1], seeds=(0,)), base_ckpt, small_splits, small_embeddings)
    key = lambda rows: {r["cell_id"]: (r["val_acc"], r["alignment_ratio"]) for r in rows}
    assert key(a.rows) == key(b.rows)


def test_failed_cell_is_recorded_and_grid_continues(base_ckpt, small_splits, small_embeddings):
    cells = (Cell("bad", "x", {"lr": -1.0}), Cell("layers=L9", "layers", {"layer_set": (9,)}),
             Cell("good", "x", {}))
    res = _run(AblationGrid("g", cells, seeds=(0,)), base_ckpt, small_splits, small_embeddings)
    status = {r["cell_id"]: r["status"] for r in res.rows}
    assert status == {"bad": "failed", "layers=L9": "failed", "good": "ok"}
    assert all(r["error"] for r in res.failed)
    assert res.summary["n_failed"] == 2
    assert res.summary["cells"]["bad"]["val_acc_mean"] is None


def test_changed_checkpoint_fails_cells(base_ckpt, small_splits, small_embeddings, monkeypatch):
    import itertools

    import roma.ablation as ab

    calls = itertools.count()
    # the first call records the hash, later calls see a different file
    monkeypatch.setattr(ab, "checkpoint_hash", lambda p: f"{next(calls):064d}")
    grid = AblationGrid("g", (Cell("c", "x"),), seeds=(0,))
    res = _run(grid, base_ckpt, small_splits, small_embeddings)
    assert res.failed and "changed" in res.rows[0]["error"]

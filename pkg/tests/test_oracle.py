import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL, spread_routers
from roma.datagen import Sample
from roma.moe import RoutingOverride, TokenSelector, forward, init_model
from roma.oracle import (
    OracleConfig,
    oracle_gap_report,
    oracle_routing_targets,
    oracle_search,
    oracle_search_batch,
    write_gap_report,
)
from roma.regularizer import task_loss


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["last", "all"]))
def test_oracle_never_worse_than_base(seed, scope):
    model = spread_routers(init_model(SMALL, seed), seed=seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, SMALL.vocab, size=(6, SMALL.seq_len))
    labels = rng.integers(0, SMALL.n_classes, size=6)
    res = oracle_search_batch(model, tokens, labels, OracleConfig(steps=15, step_size=0.5, scope=scope))
    assert np.all(res.loss_after <= res.loss_before)
    assert np.all(res.correct_after >= res.correct_before)
    # the reported loss is what the stored override actually achieves
    again = forward(model, tokens, RoutingOverride(res.override))
    np.testing.assert_allclose(task_loss(again.class_logits, labels)[0], res.loss_after, rtol=1e-10)
    np.testing.assert_array_equal(again.class_logits.argmax(axis=1) == labels, res.correct_after)


def test_zero_steps_is_base(small_model, small_splits):
    ds = small_splits[1]
    res = oracle_search_batch(small_model, ds.tokens, ds.labels, OracleConfig(steps=0))
    np.testing.assert_array_equal(res.loss_after, res.loss_before)
    assert np.all(res.steps_used == 0)


def test_search_reduces_loss_on_wrong_samples(small_model, small_splits):
    ds = small_splits[0]
    res = oracle_search_batch(small_model, ds.tokens, ds.labels, OracleConfig(steps=50, step_size=1.0, scope="all"))
    wrong = ~res.correct_before
    assert wrong.any()
    assert res.loss_after[wrong].mean() < res.loss_before[wrong].mean()


def test_batch_rows_are_independent(small_model, small_splits):
    ds = small_splits[1]
    cfg = OracleConfig(steps=10, step_size=0.5)
    batch = oracle_search_batch(small_model, ds.tokens[:5], ds.labels[:5], cfg)
    for i in range(5):
        single = oracle_search(small_model, ds[i], cfg)
        assert single.loss_after == pytest.approx(batch.loss_after[i], rel=1e-9)
        assert single.steps_used == batch.steps_used[i]
        assert single.correct_after == batch.correct_after[i]


def test_margin_stops_early(small_model, small_splits):
    ds = small_splits[1]
    res = oracle_search_batch(small_model, ds.tokens, ds.labels, OracleConfig(steps=20, margin=-1e9))
    assert np.all(res.steps_used == 0)


def test_single_search_result_fields(small_model):
    s = Sample(0, tuple([1] * SMALL.seq_len), 2, 0)
    res = oracle_search(small_model, s, OracleConfig(steps=5, layer_set=(1, 2)))
    assert set(res.routing.logits) == {(1, SMALL.seq_len - 1), (2, SMALL.seq_len - 1)}
    assert res.r_star.values.shape == (2 * SMALL.n_experts,)
    np.testing.assert_allclose(res.r_star.blocks().sum(axis=-1), 1.0)


def test_cost_multiple():
    assert OracleConfig(steps=100).cost_multiple == 303.0
    assert OracleConfig(steps=10, backward_factor=1.0).cost_multiple == 22.0


def test_config_validation():
    with pytest.raises(ValueError):
        OracleConfig(steps=-1)
    with pytest.raises(ValueError):
        OracleConfig(scope="first")


def test_routing_targets_shape(small_model, small_splits):
    ds = small_splits[1]
    r = oracle_routing_targets(small_model, ds, OracleConfig(steps=3), (1, 2), TokenSelector())
    assert r.shape == (len(ds), 2 * SMALL.n_experts)


def test_gap_report(small_model, small_splits, tmp_path):
    ds = small_splits[1]
    rep = oracle_gap_report(small_model, ds, OracleConfig(steps=20, step_size=1.0), batch_size=7)
    assert rep.oracle_accuracy >= rep.base_accuracy
    base_acc = float((forward(small_model, ds.tokens).class_logits.argmax(1) == ds.labels).mean())
    assert rep.base_accuracy == pytest.approx(base_acc)
    csv_path, json_path = write_gap_report(rep, tmp_path)
    summary = json.loads(json_path.read_text())
    assert summary["gap"] == pytest.approx(rep.gap)
    assert set(summary["per_cluster"]) == {str(c) for c in np.unique(ds.clusters)}
    assert len(csv_path.read_text().splitlines()) == len(ds) + 1
    with pytest.raises(ValueError):
        oracle_gap_report(small_model, ds.subset(np.zeros(0, dtype=int)))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from roma.evalreport import (
    ReportError,
    alignment_report,
    dump_manifold,
    evaluate,
    flops_parity,
    knn_sets,
    load_manifold,
)
from roma.moe import ModelConfig, init_model
from roma.trainer import TrainConfig, finetune


def brute_alignment(r, clusters):
    intra, inter = [], []
    for i in range(len(r)):
        for j in range(i + 1, len(r)):
            d = float(np.sqrt(((r[i] - r[j]) ** 2).sum()))
            (intra if clusters[i] == clusters[j] else inter).append(d)
    return np.mean(intra), np.mean(inter)


def _cloud(seed, n=24, d=6):
    rng = np.random.default_rng(seed)
    clusters = rng.integers(0, 3, n)
    emb = rng.standard_normal((n, 4))
    routes = rng.dirichlet(np.ones(d), size=n)
    return routes, emb, clusters


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_alignment_matches_brute_force(seed):
    r, e, c = _cloud(seed)
    rep = alignment_report(r, e, c)
    intra, inter = brute_alignment(r, c)
    assert rep.intra_cluster_routing_dist == pytest.approx(intra)
    assert rep.inter_cluster_routing_dist == pytest.approx(inter)
    assert rep.ratio == pytest.approx(intra / (inter + 1e-12))
    assert 0.0 <= rep.knn_preservation <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_alignment_invariant_under_expert_permutation(seed):
    r, e, c = _cloud(seed, d=8)
    perm = np.random.default_rng(seed).permutation(4)
    # same permutation inside each of the two 4-expert blocks
    permuted = np.concatenate([r[:, :4][:, perm], r[:, 4:][:, perm]], axis=1)
    a, b = alignment_report(r, e, c), alignment_report(permuted, e, c)
    assert a.ratio == pytest.approx(b.ratio)
    assert a.knn_preservation == b.knn_preservation


def test_identity_map_preserves_neighbours():
    r, _, c = _cloud(1)
    assert alignment_report(r, r, c).knn_preservation == 1.0


def test_perfect_alignment():
    c = np.repeat([0, 1, 2], 5)
    routes = np.eye(3)[c]
    emb = np.eye(3)[c] + 0.01 * np.random.default_rng(0).standard_normal((15, 3))
    rep = alignment_report(routes, emb, c)
    assert rep.ratio == 0.0
    assert rep.intra_cluster_routing_dist == 0.0


def test_permuted_assignment_preservation_near_chance():
    rng = np.random.default_rng(0)
    n, k = 300, 3
    emb = rng.standard_normal((n, 5))
    routes = emb[rng.permutation(n)]  # routing geometry unrelated to the embedding
    rep = alignment_report(routes, emb, np.zeros(n, dtype=int), k=k)
    chance = k / (n - 1)
    assert rep.knn_preservation < 5 * chance


def test_single_cluster_has_no_inter():
    r, e, _ = _cloud(2)
    rep = alignment_report(r, e, np.zeros(len(r), dtype=int))
    assert rep.inter_cluster_routing_dist is None and rep.ratio is None
    assert rep.as_dict()["ratio"] is None


def test_alignment_errors():
    with pytest.raises(ReportError):
        alignment_report(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(ReportError):
        alignment_report(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1))


def test_knn_sets_oracle():
    pts = np.random.default_rng(4).standard_normal((20, 3))
    d = cdist(pts, pts)
    for i, s in enumerate(knn_sets(pts, 3)):
        order = sorted((d[i, j], j) for j in range(20) if j != i)[:3]
        assert s == {j for _, j in order}


def test_evaluate(small_model, small_splits):
    va = small_splits[1]
    ev = evaluate(small_model, va)
    assert ev.accuracy == pytest.approx(ev.correct.mean())
    assert ev.predictions.shape == (len(va),)
    with pytest.raises(ReportError):
        evaluate(small_model, va.subset(np.zeros(0, dtype=int)))


def test_evaluate_random_model_near_chance():
    from roma.datagen import DatasetSpec, generate

    _, va, _ = generate(DatasetSpec(samples_per_cluster=500))
    accs = [evaluate(init_model(ModelConfig(), s), va).accuracy for s in range(3)]
    assert 0.1 < np.mean(accs) < 0.45


def test_manifold_dump_roundtrip(tmp_path):
    r, e, c = _cloud(3)
    ids = np.arange(100, 100 + len(r))
    path = dump_manifold(ids, r, e, c, tmp_path / "m.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == len(r) + 1
    assert len(lines[0].split(",")) == 2 + e.shape[1] + r.shape[1]
    i2, r2, e2, c2 = load_manifold(path)
    np.testing.assert_array_equal(i2, ids)
    np.testing.assert_array_equal(r2, r)
    np.testing.assert_array_equal(e2, e)
    np.testing.assert_array_equal(c2, c)
    with pytest.raises(ReportError):
        dump_manifold(ids[:-1], r, e, c, tmp_path / "bad.csv")


def test_flops_parity_after_finetune(small_model, small_splits, small_embeddings):
    tuned, _ = finetune(small_model, small_splits[0], small_embeddings, TrainConfig(epochs=1))
    rep = flops_parity(small_model, tuned, oracle_steps=100)
    assert rep["parity"] and rep["flops_before"] == rep["flops_after"]
    assert rep["oracle_cost_multiple"] == 303.0
    with pytest.raises(ReportError):
        flops_parity(small_model, init_model(ModelConfig(), 0))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist

from roma.datagen import DatasetSpec, Sample, generate
from roma.embedding import (
    EmbeddingError,
    EmbeddingTable,
    SimilarityConfig,
    cluster_anchor,
    embed_dataset,
    embed_histogram,
    embed_oracle,
    gaussian_similarity,
    load_embeddings,
    median_sigma,
    save_embeddings,
)


def test_zero_jitter_is_anchor():
    s = Sample(7, (0, 1, 2), 0, 2)
    np.testing.assert_array_equal(embed_oracle(s, 0.0, seed=1), cluster_anchor(2, 16, 1))
    t = Sample(8, (3, 3, 3), 1, 2)
    np.testing.assert_array_equal(embed_oracle(s, 0.0, 1), embed_oracle(t, 0.0, 1))


def test_oracle_embedding_unit_norm_and_deterministic():
    s = Sample(11, (0,), 0, 1)
    v = embed_oracle(s, 0.3, seed=4)
    assert abs(np.linalg.norm(v) - 1) < 1e-9
    np.testing.assert_array_equal(v, embed_oracle(s, 0.3, seed=4))
    assert not np.array_equal(v, embed_oracle(Sample(12, (0,), 0, 1), 0.3, seed=4))


def test_oracle_requires_cluster():
    with pytest.raises(EmbeddingError):
        embed_oracle(Sample(1, (0,), 0, None), 0.1, 0)


def test_within_cluster_similarity_exceeds_between():
    train, _, _ = generate(DatasetSpec(n_clusters=4, samples_per_cluster=30))
    table = embed_dataset(train, "oracle", seed=0, jitter=0.1)
    cfg = SimilarityConfig(1.0)
    sims = gaussian_similarity(table.vectors[:, None, :], table.vectors[None, :, :], cfg)
    same = train.clusters[:, None] == train.clusters[None, :]
    off = ~np.eye(len(train), dtype=bool)
    assert sims[same & off].mean() > sims[~same].mean()


@given(st.lists(st.integers(0, 7), min_size=3, max_size=12), st.randoms(use_true_random=False))
def test_histogram_embedding_is_order_free(tokens, rnd):
    shuffled = list(tokens)
    rnd.shuffle(shuffled)
    a = embed_histogram(Sample(0, tuple(tokens), 0, 0), 16, 3, vocab=8)
    b = embed_histogram(Sample(1, tuple(shuffled), 0, 0), 16, 3, vocab=8)
    np.testing.assert_allclose(a, b, atol=1e-15)
    assert abs(np.linalg.norm(a) - 1) < 1e-9


def test_histogram_embedding_self_similarity_and_vocab_independence():
    s = Sample(0, (2, 2, 2, 2), 0, 0)
    v = embed_histogram(s, 16, 0, vocab=8)
    assert gaussian_similarity(v, v, SimilarityConfig(0.7)) == 1.0
    # inferring the vocabulary from the tokens gives the same vector
    np.testing.assert_allclose(embed_histogram(s, 16, 0), v)


def test_histogram_table_matches_per_sample():
    train, _, _ = generate(DatasetSpec(n_clusters=2, samples_per_cluster=10))
    table = embed_dataset(train, "histogram", seed=2, vocab=8)
    for i in range(len(train)):
        np.testing.assert_allclose(table.vectors[i], embed_histogram(train[i], 16, 2, vocab=8), atol=1e-14)


def test_gaussian_similarity_values():
    cfg = SimilarityConfig(0.5)
    a = np.zeros(3)
    b = np.array([np.sqrt(2) * 0.5, 0.0, 0.0])  # squared distance 2 sigma^2
    assert gaussian_similarity(a, a, cfg) == 1.0
    assert gaussian_similarity(a, b, cfg) == pytest.approx(np.exp(-1), abs=1e-12)
    assert gaussian_similarity(a, b, cfg) == pytest.approx(0.367879, abs=1e-6)
    with pytest.raises(EmbeddingError):
        gaussian_similarity(np.zeros(2), np.zeros(3), cfg)
    with pytest.raises(EmbeddingError):
        SimilarityConfig(0.0)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_similarity_symmetric_and_decreasing(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(4), rng.standard_normal(4)
    cfg = SimilarityConfig(1.3)
    assert gaussian_similarity(a, b, cfg) == gaussian_similarity(b, a, cfg)
    near = a + 0.5 * (b - a)
    assert gaussian_similarity(a, near, cfg) > gaussian_similarity(a, b, cfg)


def test_median_sigma_oracle():
    t = EmbeddingTable(np.arange(5), np.random.default_rng(0).standard_normal((5, 3)))
    assert median_sigma(t) == pytest.approx(np.median(pdist(t.vectors)))
    assert median_sigma(EmbeddingTable(np.arange(1), np.ones((1, 3)))) == 1.0


def test_table_roundtrip(tmp_path):
    train, _, _ = generate(DatasetSpec(n_clusters=2, samples_per_cluster=10))
    table = embed_dataset(train, seed=0)
    save_embeddings(table, tmp_path / "e.jsonl")
    back = load_embeddings(tmp_path / "e.jsonl")
    assert back == table
    assert int(train.ids[3]) in back
    np.testing.assert_array_equal(back.lookup(train.ids[:3]), table.vectors[:3])


def test_empty_table_roundtrip(tmp_path):
    empty = EmbeddingTable(np.zeros(0, dtype=np.int64), np.zeros((0, 16)))
    save_embeddings(empty, tmp_path / "e.jsonl")
    assert len(load_embeddings(tmp_path / "e.jsonl")) == 0


def test_load_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id": 1, "vector": [1.0, 0.0]}\n{"id": 1, "vector": [0.0, 1.0]}\n')
    with pytest.raises(EmbeddingError, match="1"):
        load_embeddings(p)
    p.write_text('{"id": 1, "vector": [1.0, 0.0]}\n{"id": 9, "vector": [0.0, 1.0, 0.0]}\n')
    with pytest.raises(EmbeddingError, match="9"):
        load_embeddings(p)


def test_table_rejects_duplicates_and_unknown_ids():
    with pytest.raises(EmbeddingError):
        EmbeddingTable(np.array([1, 1]), np.zeros((2, 2)))
    t = EmbeddingTable(np.array([1, 2]), np.eye(2))
    with pytest.raises((EmbeddingError, KeyError)):
        t.lookup([3])

import numpy as np
import pytest

from roma.datagen import DatasetSpec, generate
from roma.embedding import embed_dataset
from roma.moe import ModelConfig, init_model

TINY = ModelConfig(n_layers=2, n_experts=3, top_k=2, d_model=4, d_ff=8, vocab=6, n_classes=3, seq_len=5)
SMALL = ModelConfig(n_layers=3, n_experts=4, top_k=2, d_model=8, d_ff=8, vocab=8, n_classes=4, seq_len=6)
SMALL_DATA = DatasetSpec(n_clusters=3, samples_per_cluster=40, seq_len=6, vocab=8, n_classes=4, seed=3)


def spread_routers(model, seed=0, scale=1.0):
    """Routers with O(1) logits so top-K choices are well separated."""
    rng = np.random.default_rng(seed)
    for l in range(model.config.n_layers):
        w = model.params[f"router.{l}.weight"]
        model.params[f"router.{l}.weight"] = scale * rng.standard_normal(w.shape)
        model.params[f"router.{l}.bias"] = 0.5 * scale * rng.standard_normal(w.shape[0])
    return model


@pytest.fixture
def tiny_model():
    return spread_routers(init_model(TINY, seed=0))


@pytest.fixture
def small_model():
    return spread_routers(init_model(SMALL, seed=1), seed=1)


@pytest.fixture(scope="session")
def small_splits():
    return generate(SMALL_DATA)


@pytest.fixture(scope="session")
def small_embeddings(small_splits):
    tr, va, te = small_splits
    return embed_dataset(tr, seed=3).merge(embed_dataset(va, seed=3)).merge(embed_dataset(te, seed=3))


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (name, bool(ok), detail)
    print(f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {name}: {detail}")

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import logsumexp

from roma.regularizer import (
    LossError,
    baseline_penalty,
    combine,
    distill_loss,
    manifold_grad,
    manifold_loss,
    task_loss,
)

finite = st.floats(-4, 4, allow_nan=False)


def _fd(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = eps
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


@given(arrays(np.float64, 5, elements=finite), st.integers(0, 4))
def test_task_loss_matches_logsumexp(z, y):
    loss, grad = task_loss(z, y)
    assert np.isclose(loss, logsumexp(z) - z[y])
    np.testing.assert_allclose(grad, _fd(lambda v: task_loss(v, y)[0], z), atol=1e-7)


def test_task_loss_batch_and_validation():
    z = np.array([[0.0, 0.0], [10.0, -10.0]])
    loss, grad = task_loss(z, np.array([0, 1]))
    np.testing.assert_allclose(loss, [np.log(2), 20.0], rtol=1e-9)
    assert grad.shape == z.shape
    with pytest.raises(LossError):
        task_loss(z, np.array([0, 2]))


def _neigh(seed, m=4, n=6):
    rng = np.random.default_rng(seed)
    targets = rng.random((m, n))
    w = rng.random(m) + 0.05
    return targets, w / w.sum()


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_manifold_loss_zero_iff_all_targets_equal_r(seed):
    targets, w = _neigh(seed)
    r = targets[0]
    same = np.repeat(r[None, :], len(w), axis=0)
    assert manifold_loss(r, same, w) == 0.0
    assert manifold_loss(r, targets, w) > 0.0


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_manifold_gradient_vanishes_at_weighted_mean(seed):
    targets, w = _neigh(seed)
    mean = w @ targets
    np.testing.assert_allclose(manifold_grad(mean, targets, w), 0.0, atol=1e-12)
    # and the weighted mean is the minimiser
    r = mean + np.random.default_rng(seed).normal(0, 0.1, mean.shape)
    assert manifold_loss(r, targets, w) > manifold_loss(mean, targets, w)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_manifold_gradient_finite_differences(seed):
    targets, w = _neigh(seed)
    r = np.random.default_rng(seed + 1).random(targets.shape[1])
    np.testing.assert_allclose(manifold_grad(r, targets, w), _fd(lambda v: manifold_loss(v, targets, w), r),
                               atol=1e-7)


def test_manifold_loss_hand_value():
    r = np.array([1.0, 0.0])
    targets = np.array([[0.0, 0.0], [1.0, 1.0]])
    w = np.array([0.25, 0.75])
    assert manifold_loss(r, targets, w) == pytest.approx(0.25 * 1 + 0.75 * 1)
    np.testing.assert_allclose(manifold_grad(r, targets, w), 2 * (r - w @ targets))


def test_manifold_shape_errors():
    with pytest.raises(LossError):
        manifold_loss(np.zeros(3), np.zeros((2, 4)), np.ones(2) / 2)
    with pytest.raises(LossError):
        manifold_loss(np.zeros(3), np.zeros((2, 3)), np.ones(3) / 3)


def test_combine():
    b = combine(1.5, 2.0, 0.0)
    assert b.total == 1.5
    assert combine(1.5, 2.0, 0.5).total == 2.5
    with pytest.raises(LossError):
        combine(1.0, 1.0, -0.1)


@given(arrays(np.float64, 6, elements=st.floats(0.01, 1.0)))
def test_baseline_penalty_gradients(r):
    for kind in ("l2", "entropy"):
        val, grad = baseline_penalty(kind, r, block_size=3)
        np.testing.assert_allclose(grad, _fd(lambda v: baseline_penalty(kind, v, block_size=3)[0], r),
                                   rtol=1e-5, atol=1e-6)


@given(arrays(np.float64, 6, elements=finite))
def test_l1_gradient_away_from_zero(z):
    assume(np.all(np.abs(z) > 1e-3))
    val, grad = baseline_penalty("l1", z)
    assert val == pytest.approx(np.abs(z).sum())
    np.testing.assert_allclose(grad, _fd(lambda v: baseline_penalty("l1", v)[0], z), atol=1e-6)


def test_entropy_sign_and_values():
    uniform = np.full(4, 0.25)
    val, _ = baseline_penalty("entropy", uniform, block_size=4)
    assert val == pytest.approx(np.log(4))
    neg, g = baseline_penalty("entropy", uniform, block_size=4, entropy_sign=-1.0)
    assert neg == pytest.approx(-np.log(4))
    one_hot = np.array([1.0, 0.0, 0.0, 0.0])
    assert baseline_penalty("entropy", one_hot, block_size=4)[0] == pytest.approx(0.0)
    with pytest.raises(LossError):
        baseline_penalty("entropy", uniform)
    with pytest.raises(LossError):
        baseline_penalty("huber", uniform)


def test_distill_loss():
    r, s = np.array([0.2, 0.8]), np.array([0.5, 0.5])
    val, grad = distill_loss(r, s)
    assert val == pytest.approx(0.18)
    np.testing.assert_allclose(grad, 2 * (r - s))
    assert distill_loss(s, s)[0] == 0.0
    with pytest.raises(LossError):
        distill_loss(r, np.zeros(3))

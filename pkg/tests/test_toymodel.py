import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from rsavq import toymodel
from rsavq.errors import ValidationError
from rsavq.toymodel import ToyTask


def small_task(rng, m=3, n=4, s=20, seq=1):
    return ToyTask(rng.standard_normal((m, n)), rng.standard_normal((s, n)), rng.integers(0, m, s), sequence_length=seq)


def loss_reference(w, x, y):
    """Direct per-sample formula: -log(exp(z_y) / sum exp(z))."""
    total = 0.0
    for xi, yi in zip(x, y):
        z = w @ xi
        z = z - z.max()
        total += -(z[yi] - np.log(np.sum(np.exp(z))))
    return total / len(y)


def test_zero_weight_loss_is_log_m(rng):
    task = small_task(rng, m=5)
    assert toymodel.loss(task, np.zeros((5, 4))) == pytest.approx(np.log(5), rel=1e-12)


def test_loss_matches_reference(rng):
    task = small_task(rng)
    w = rng.standard_normal((3, 4)) * 3
    assert toymodel.loss(task, w) == pytest.approx(loss_reference(w, task.inputs, task.labels), rel=1e-12)


def test_saturated_loss_is_finite():
    task = ToyTask(np.zeros((2, 1)), np.array([[1.0]]), np.array([1]))
    assert toymodel.loss(task, np.array([[1000.0], [-1000.0]])) == pytest.approx(2000.0)
    assert toymodel.loss(task, np.array([[-1000.0], [1000.0]])) == pytest.approx(0.0, abs=1e-300)


def test_grad_hand_example():
    task = ToyTask(np.zeros((2, 3)), np.array([[1.0, 0.0, 0.0]]), np.array([0]))
    np.testing.assert_allclose(toymodel.grad(task, np.zeros((2, 3))), [[-0.5, 0, 0], [0.5, 0, 0]])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 4), st.integers(1, 4), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_grad_finite_differences(m, n, s, seed):
    rng = np.random.default_rng(seed)
    task = small_task(rng, m, n, s)
    w = rng.standard_normal((m, n))
    g = toymodel.grad(task, w)
    h = 1e-6
    fd = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        e = np.zeros_like(w)
        e[idx] = h
        fd[idx] = (toymodel.loss(task, w + e) - toymodel.loss(task, w - e)) / (2 * h)
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_grad_samples_mean_is_grad(rng):
    task = small_task(rng, s=24, seq=4)
    w = rng.standard_normal((3, 4))
    bundle = toymodel.grad_samples(task, w)
    assert bundle.samples.shape == (6, 3, 4)
    np.testing.assert_allclose(bundle.mean(), toymodel.grad(task, w), rtol=1e-12, atol=1e-15)


def test_grad_samples_sequences_are_consecutive(rng):
    task = small_task(rng, s=6, seq=2)
    w = rng.standard_normal((3, 4))
    single = toymodel.grad_samples(ToyTask(w, task.inputs, task.labels), w).samples
    np.testing.assert_allclose(toymodel.grad_samples(task, w).samples, single.reshape(3, 2, 3, 4).mean(axis=1))


def test_dense_fim_zero_inputs():
    task = ToyTask(np.ones((2, 3)), np.zeros((4, 3)), np.array([0, 1, 0, 1]))
    np.testing.assert_array_equal(toymodel.empirical_fim_dense(task, task.weight), np.zeros((6, 6)))


def test_dense_fim_paths_agree_and_psd(rng):
    task = small_task(rng, 3, 4, 15)
    w = rng.standard_normal((3, 4))
    a = toymodel.empirical_fim_dense(task, w, "closed-form")
    b = toymodel.empirical_fim_dense(task, w, "classes")
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(a, a.T)
    assert np.linalg.eigvalsh(a).min() >= -1e-12


def test_dense_fim_monte_carlo():
    rng = np.random.default_rng(7)
    task = small_task(rng, 2, 2, 5)
    w = rng.standard_normal((2, 2))
    exact = toymodel.empirical_fim_dense(task, w)
    draws = 100_000
    xi = rng.integers(0, task.sample_count, draws)
    x = task.inputs[xi]
    p = softmax(x @ w.T, axis=1)
    y = toymodel.sample_labels(rng, p)
    onehot = np.eye(2)[y]
    scores = ((onehot - p)[:, :, None] * x[:, None, :]).reshape(draws, 4)
    outer = np.einsum("si,sj->sij", scores, scores).reshape(draws, 16)
    est = outer.mean(axis=0)
    se = outer.std(axis=0, ddof=1) / np.sqrt(draws)
    assert np.all(np.abs(est - exact.ravel()) <= 3 * se + 1e-12)


def test_dense_fim_size_guard(rng):
    task = small_task(rng, 5, 13, 4)
    with pytest.raises(ValidationError, match="64"):
        toymodel.empirical_fim_dense(task, task.weight)
    with pytest.raises(ValidationError):
        toymodel.empirical_fim_dense(small_task(rng), np.zeros((3, 4)), "sampled")


def test_kl_properties(rng):
    task = small_task(rng, 3, 4, 50)
    w = rng.standard_normal((3, 4))
    assert toymodel.kl_between(task, w, w) == 0.0
    for _ in range(10):
        assert toymodel.kl_between(task, w, w + rng.standard_normal((3, 4))) >= 0.0


def test_kl_matches_quadratic_form(rng):
    task = small_task(rng, 3, 4, 50)
    w = rng.standard_normal((3, 4))
    f = toymodel.empirical_fim_dense(task, w)
    d = rng.standard_normal((3, 4))
    d *= 1e-3 / np.linalg.norm(d)
    quad = 0.5 * d.ravel() @ f @ d.ravel()
    assert toymodel.kl_between(task, w, w + d) == pytest.approx(quad, rel=1e-2)


def test_make_task_presets():
    t = toymodel.make_task("default", seed=0)
    assert t.shape == (4, 8) and t.sample_count == 256 and t.sequence_length == 1
    h = toymodel.make_task("heterogeneous", seed=0)
    assert h.shape == (8, 32) and h.sample_count == 8192 and h.sequence_length == 8
    assert toymodel.grad_samples(h, h.weight).sample_count == 1024


def test_make_task_deterministic():
    a = toymodel.make_task(seed=3)
    b = toymodel.make_task(seed=3)
    for name in ("weight", "inputs", "labels", "truth"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.inputs, toymodel.make_task(seed=4).inputs)


def test_hot_pair_structure():
    t = toymodel.make_task(seed=0)
    u = 0.5 * (t.truth[0] + t.truth[1])
    np.testing.assert_allclose(0.5 * (t.weight[0] + t.weight[1]), u)
    np.testing.assert_allclose(t.weight[0] - t.weight[1], 0.5 * (t.truth[0] - t.truth[1]))
    np.testing.assert_array_equal(t.weight[2:], t.truth[2:])


def test_make_task_validation():
    with pytest.raises(ValidationError, match="M >= 2"):
        toymodel.make_task(m=1)
    with pytest.raises(ValidationError):
        toymodel.make_task(samples=10, sequence_length=3)
    with pytest.raises(ValidationError):
        toymodel.make_task("nope")


def test_task_validation(rng):
    with pytest.raises(ValidationError):
        ToyTask(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(4, dtype=int))
    with pytest.raises(ValidationError):
        ToyTask(np.zeros((2, 3)), np.zeros((4, 3)), np.array([0, 1, 2, 0]))
    with pytest.raises(ValidationError):
        toymodel.loss(small_task(rng), np.zeros((2, 2)))


def test_holdout():
    t = toymodel.make_task(seed=0)
    h = toymodel.holdout(t)
    assert h.sample_count == 8192
    np.testing.assert_array_equal(h.weight, t.weight)
    assert not np.array_equal(h.inputs[:256], t.inputs)
    np.testing.assert_array_equal(h.inputs, toymodel.holdout(t).inputs)
    with pytest.raises(ValidationError):
        toymodel.holdout(ToyTask(t.weight, t.inputs, t.labels))


def test_labels_follow_model_probabilities():
    rng = np.random.default_rng(0)
    p = np.tile([0.2, 0.5, 0.3], (50_000, 1))
    freq = np.bincount(toymodel.sample_labels(rng, p), minlength=3) / 50_000
    np.testing.assert_allclose(freq, [0.2, 0.5, 0.3], atol=0.01)

"""A linear-softmax classifier used as a small, exactly differentiable calibration model.

p(y | x; W) = softmax(W x) with W of shape M x N (M classes = output channels).

Tasks are generated from a ground-truth matrix in which two "hot" classes are
easy to confuse (rows u + d and u - d) while the remaining "cold" classes are
small. The model weight under-estimates the separation d of the hot pair, so
the model is imperfect in the high-curvature channels. Quantization errors there
cost real loss, and descent-aligned errors can recover some of it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import ValidationError
from .tensorio import GradientBundle, check_matrix

DENSE_FIM_LIMIT = 64


@dataclass(frozen=True)
class ToyPreset:
    """Generator settings for :func:`make_task`.

    Attributes:
        m, n, samples: class count, input dimension, calibration inputs.
        sequence_length: inputs averaged into one gradient-bundle sample.
        cold_scale: std of the cold rows of the ground truth.
        shared_scale: std of the shared component u of the hot pair.
        split_scale: std of the separating component d of the hot pair.
        shrink: fraction of d kept by the model weight.
        holdout_samples: size of the fresh evaluation split.
    """

    m: int
    n: int
    samples: int
    sequence_length: int = 1
    cold_scale: float = 0.5
    shared_scale: float = 1.0
    split_scale: float = 1.0
    shrink: float = 0.5
    holdout_samples: int = 8192


PRESETS = {
    "default": ToyPreset(m=4, n=8, samples=256),
    "heterogeneous": ToyPreset(
        m=8, n=32, samples=8192, sequence_length=8, cold_scale=0.3, shared_scale=1.5, shrink=0.2
    ),
}


@dataclass(frozen=True, eq=False)
class ToyTask:
    """Weights plus a labelled calibration set.

    Attributes:
        weight: M x N model weight W.
        inputs: S x N calibration inputs.
        labels: S class ids in [0, M).
        rng_seed: seed the task was generated from.
        sequence_length: consecutive inputs that form one gradient sample.
        truth: ground-truth weight used to draw labels, if known.
        preset: generator name, if generated.
    """

    weight: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray
    rng_seed: int = 0
    sequence_length: int = 1
    truth: np.ndarray | None = None
    preset: str | None = None

    def __post_init__(self):
        w = check_matrix(self.weight, "weight")
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels)
        m, n = w.shape
        if m < 2:
            raise ValidationError(f"toy task needs M >= 2 classes, got {m}")
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != n:
            raise ValidationError(f"inputs must be (S, {n}) with S >= 1, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("inputs contain non-finite values")
        if y.shape != (x.shape[0],) or not np.issubdtype(y.dtype, np.integer):
            raise ValidationError(f"labels must be {x.shape[0]} integers")
        if y.size and (y.min() < 0 or y.max() >= m):
            raise ValidationError(f"labels must lie in [0, {m})")
        t = self.sequence_length
        if t < 1 or x.shape[0] % t:
            raise ValidationError(f"sequence_length {t} must divide the {x.shape[0]} inputs")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y.astype(np.int64))
        if self.truth is not None:
            object.__setattr__(self, "truth", check_matrix(self.truth, "truth"))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    @property
    def sample_count(self) -> int:
        return self.inputs.shape[0]


def sample_labels(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs`` by inverse CDF."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def _ground_truth(rng, preset: ToyPreset, m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    truth = rng.standard_normal((m, n)) * preset.cold_scale
    u = rng.standard_normal(n) * preset.shared_scale
    d = rng.standard_normal(n) * preset.split_scale
    truth[0], truth[1] = u + d, u - d
    weight = truth.copy()
    weight[0], weight[1] = u + preset.shrink * d, u - preset.shrink * d
    return truth, weight


def make_task(
    preset: str = "default",
    seed: int = 0,
    m: int | None = None,
    n: int | None = None,
    samples: int | None = None,
    sequence_length: int | None = None,
) -> ToyTask:
    """Generate a seeded task; explicit sizes override the preset's."""
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[preset]
    p = replace(
        p,
        m=p.m if m is None else m,
        n=p.n if n is None else n,
        samples=p.samples if samples is None else samples,
        sequence_length=p.sequence_length if sequence_length is None else sequence_length,
    )
    if p.m < 2:
        raise ValidationError(f"toy task needs M >= 2 classes, got {p.m}")
    if p.n < 1 or p.samples < 1:
        raise ValidationError("N and the sample count must be >= 1")
    rng = np.random.default_rng(seed)
    truth, weight = _ground_truth(rng, p, p.m, p.n)
    x = rng.standard_normal((p.samples, p.n))
    y = sample_labels(rng, softmax(x @ truth.T, axis=1))
    return ToyTask(weight, x, y, seed, p.sequence_length, truth, preset)


def holdout(task: ToyTask, samples: int | None = None) -> ToyTask:
    """Fresh inputs and labels drawn from the ground truth with seed + 1."""
    if task.truth is None:
        raise ValidationError("holdout split needs the task's ground-truth weight")
    if samples is None:
        samples = PRESETS[task.preset].holdout_samples if task.preset in PRESETS else 8192
    rng = np.random.default_rng(task.rng_seed + 1)
    x = rng.standard_normal((samples, task.shape[1]))
    y = sample_labels(rng, softmax(x @ task.truth.T, axis=1))
    return ToyTask(task.weight, x, y, task.rng_seed + 1, 1, task.truth, task.preset)


def _check_w(task: ToyTask, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != task.shape:
        raise ValidationError(f"weight shape {w.shape} does not match task {task.shape}")
    return w


def loss(task: ToyTask, w) -> float:
    """Mean cross-entropy of softmax(W x) against the labels."""
    w = _check_w(task, w)
    logp = log_softmax(task.inputs @ w.T, axis=1)
    return float(-np.mean(logp[np.arange(task.sample_count), task.labels]))


def _residuals(task: ToyTask, w: np.ndarray) -> np.ndarray:
    r = softmax(task.inputs @ w.T, axis=1)
    r[np.arange(task.sample_count), task.labels] -= 1.0
    return r


def grad(task: ToyTask, w) -> np.ndarray:
    """Gradient of :func:`loss` with respect to W."""
    w = _check_w(task, w)
    return _residuals(task, w).T @ task.inputs / task.sample_count


def grad_samples(task: ToyTask, w) -> GradientBundle:
    """Per-sequence gradients (softmax(Wx) - onehot(y)) x^T.

    Consecutive groups of ``task.sequence_length`` inputs form one sequence whose
    gradient is the mean of its per-input gradients. Order follows the inputs.
    """
    w = _check_w(task, w)
    r = _residuals(task, w)
    per_input = r[:, :, None] * task.inputs[:, None, :]
    t = task.sequence_length
    m, n = task.shape
    return GradientBundle(per_input.reshape(-1, t, m, n).mean(axis=1))


def empirical_fim_dense(task: ToyTask, w, method: str = "closed-form") -> np.ndarray:
    """Exact model-distribution Fisher matrix in row-major vec(W) coordinates.

    F = mean_x sum_y p(y|x) s_y s_y^T with s_y = vec((e_y - p) x^T). The
    ``closed-form`` path uses mean_x (diag(p) - p p^T) (x) x x^T; the ``classes``
    path sums the outer products class by class.

    Raises:
        ValidationError: if M * N exceeds the dense size limit or the method is unknown.
    """
    w = _check_w(task, w)
    m, n = task.shape
    if m * n > DENSE_FIM_LIMIT:
        raise ValidationError(f"dense FIM limited to M*N <= {DENSE_FIM_LIMIT}, got {m * n}")
    p = softmax(task.inputs @ w.T, axis=1)
    x = task.inputs
    s = task.sample_count
    if method == "closed-form":
        cov = np.einsum("sa,ab->sab", p, np.eye(m)) - np.einsum("sa,sb->sab", p, p)
        outer = np.einsum("si,sj->sij", x, x)
        f = np.einsum("sab,sij->aibj", cov, outer).reshape(m * n, m * n) / s
    elif method == "classes":
        f = np.zeros((m * n, m * n))
        eye = np.eye(m)
        for i in range(s):
            for y in range(m):
                score = np.kron(eye[y] - p[i], x[i])
                f += p[i, y] * np.outer(score, score)
        f /= s
    else:
        raise ValidationError(f"unknown method {method!r}")
    return 0.5 * (f + f.T)


def kl_between(task: ToyTask, w, w2) -> float:
    """Mean over inputs of KL(softmax(W x) || softmax(W2 x))."""
    w = _check_w(task, w)
    w2 = _check_w(task, w2)
    lp = log_softmax(task.inputs @ w.T, axis=1)
    lq = log_softmax(task.inputs @ w2.T, axis=1)
    return float(max(np.mean(np.sum(np.exp(lp) * (lp - lq), axis=1)), 0.0))

"""Grouped product vector quantization with natural-gradient target shifting.

Each channel row is cut into length-v vectors. Vectors of a sensitivity group
share one codebook fitted by weighted k-means. With lambda > 0 the k-means
targets are shifted along a descent direction derived from the natural
gradient, so that the quantization error is pushed toward directions where the
loss is insensitive or even decreasing.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvariantError, RsavqError, ValidationError
from .fim import estimate_kronecker_fim, natural_gradient
from .tensorio import (
    GradientBundle,
    GroupBlock,
    QuantizedTensor,
    check_matrix,
    codebook_size,
)
from .wcsg import (
    ChannelMetric,
    SensitivityProfile,
    allocate_bits,
    bit_budget,
    channel_sensitivity,
    group_channels,
)

METRIC_MODES = ("euclidean", "fisher-diagonal")
ALLOCATION_MODES = ("wcsg", "uniform")
# Bounds the size of the (chunk, K, v) distance block in encode.
_DIST_BLOCK = 1 << 22


@dataclass(frozen=True)
class QuantizeConfig:
    """Pipeline settings.

    Only the first eight fields are read from JSON config files. ``allocation``
    and ``allocation_rule`` are programmatic switches used by the ablations.
    """

    vector_length: int = 6
    group_count: int = 4
    target_bits: float = 2.0
    lam: float = 0.05
    kmeans_iters: int = 50
    kmeans_tol: float = 1e-8
    seed: int = 0
    metric_mode: str = "fisher-diagonal"
    allocation: str = "wcsg"
    allocation_rule: str = "lagrangian"

    JSON_KEYS = (
        "vector_length",
        "group_count",
        "target_bits",
        "lambda",
        "kmeans_iters",
        "kmeans_tol",
        "seed",
        "metric_mode",
    )

    def __post_init__(self):
        if int(self.vector_length) != self.vector_length or self.vector_length < 1:
            raise ValidationError(f"vector_length must be an integer >= 1, got {self.vector_length}")
        if int(self.group_count) != self.group_count or self.group_count < 1:
            raise ValidationError(f"group_count must be an integer >= 1, got {self.group_count}")
        if not np.isfinite(self.target_bits) or self.target_bits < 1:
            raise ValidationError(f"target_bits must be >= 1, got {self.target_bits}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if int(self.kmeans_iters) != self.kmeans_iters or self.kmeans_iters < 0:
            raise ValidationError(f"kmeans_iters must be an integer >= 0, got {self.kmeans_iters}")
        if not self.kmeans_tol >= 0:
            raise ValidationError(f"kmeans_tol must be >= 0, got {self.kmeans_tol}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.metric_mode not in METRIC_MODES:
            raise ValidationError(f"metric_mode must be one of {METRIC_MODES}, got {self.metric_mode!r}")
        if self.allocation not in ALLOCATION_MODES:
            raise ValidationError(f"allocation must be one of {ALLOCATION_MODES}, got {self.allocation!r}")

    @classmethod
    def from_dict(cls, data: dict, base: "QuantizeConfig | None" = None) -> "QuantizeConfig":
        """Build a config from JSON-style keys, overriding ``base`` (or defaults)."""
        unknown = set(data) - set(cls.JSON_KEYS)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {("lam" if k == "lambda" else k): v for k, v in data.items()}
        return replace(base or cls(), **kwargs)

    @classmethod
    def from_json(cls, path, base: "QuantizeConfig | None" = None) -> "QuantizeConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        return cls.from_dict(data, base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


# ---------------------------------------------------------------------------
# Vector views
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VectorView:
    """All v-vectors of one group, ordered by channel then position.

    Attributes:
        group: group id.
        channels: channel id of each vector.
        positions: position of each vector within its channel row.
        values: (n, v) weights, zero-padded at the end of each row.
        targets: (n, v) k-means targets; equal to ``values`` until shifted.
    """

    group: int
    channels: np.ndarray
    positions: np.ndarray
    values: np.ndarray
    targets: np.ndarray


def padding(cols: int, v: int) -> int:
    return (-cols) % v


def _row_vectors(rows: np.ndarray, v: int) -> np.ndarray:
    pad = padding(rows.shape[1], v)
    return np.pad(rows, ((0, 0), (0, pad))).reshape(-1, v)


def reshape_to_vectors(w, groups, v: int) -> list[VectorView]:
    """Split each group's channel rows into consecutive length-v vectors.

    Args:
        w: M x N matrix.
        groups: sequence of channel-id collections.
        v: vector length.
    """
    w = check_matrix(w, "weights")
    if v < 1:
        raise ValidationError("vector length must be >= 1")
    per_row = (w.shape[1] + padding(w.shape[1], v)) // v
    views = []
    for gi, chans in enumerate(groups):
        ch = np.asarray(chans, dtype=np.int64)
        vals = _row_vectors(w[ch], v)
        views.append(
            VectorView(
                group=gi,
                channels=np.repeat(ch, per_row),
                positions=np.tile(np.arange(per_row), ch.size),
                values=vals,
                targets=vals.copy(),
            )
        )
    return views


def build_targets(views: list[VectorView], direction, lam: float) -> list[VectorView]:
    """Shift targets to values + lam * direction, chunked like the values.

    ``direction`` is a full M x N matrix. The pipeline passes a rescaled negative
    natural gradient here so that decoded weights move downhill.
    """
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    d = np.asarray(direction, dtype=np.float64)
    if d.ndim != 2:
        raise ValidationError(f"direction must be a matrix, got shape {d.shape}")
    out = []
    for view in views:
        v = view.values.shape[1]
        per_row = (d.shape[1] + padding(d.shape[1], v)) // v
        rows = view.channels[::per_row]
        if rows.size and rows.max() >= d.shape[0]:
            raise ValidationError("direction has fewer rows than the vector view references")
        chunk = _row_vectors(d[rows], v)
        if chunk.shape != view.values.shape:
            raise ValidationError(f"direction chunks {chunk.shape} do not match values {view.values.shape}")
        targets = view.values + lam * chunk if lam else view.values.copy()
        out.append(replace(view, targets=targets))
    return out


# ---------------------------------------------------------------------------
# Weighted k-means
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Codebook:
    """K x v centroids plus the diagonal metric they were fitted under.

    Attributes:
        centroids: (K, v) array.
        metric_weights: (v,) positive per-coordinate weights.
        objective: final k-means objective.
        history: objective after initialization and after each Lloyd step.
    """

    centroids: np.ndarray
    metric_weights: np.ndarray
    objective: float = 0.0
    history: tuple[float, ...] = field(default=())

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _check_weights(metric_weights, v: int) -> np.ndarray:
    if metric_weights is None:
        return np.ones(v)
    w = np.asarray(metric_weights, dtype=np.float64)
    if w.shape != (v,) or np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValidationError(f"metric_weights must be {v} positive finite numbers")
    return w


def weighted_distances(x: np.ndarray, centroids: np.ndarray, metric_weights: np.ndarray) -> np.ndarray:
    """(n, K) matrix of sum_j m_j (x_j - c_j)^2, computed without expansion."""
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkj,j->nk", diff * diff, metric_weights)


def assign(x: np.ndarray, centroids: np.ndarray, metric_weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row with ties to the lowest index, plus its distance."""
    n = x.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    step = max(1, _DIST_BLOCK // max(1, centroids.shape[0] * x.shape[1]))
    for s in range(0, n, step):
        d = weighted_distances(x[s : s + step], centroids, metric_weights)
        lab = np.argmin(d, axis=1)
        labels[s : s + step] = lab
        dist[s : s + step] = d[np.arange(lab.size), lab]
    return labels, dist


def _kmeans_pp(x: np.ndarray, k: int, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = weighted_distances(x, centers[:1], w)[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centers[i] = x[pick]
        closest = np.minimum(closest, weighted_distances(x, centers[i : i + 1], w)[:, 0])
    return centers


def _update(x: np.ndarray, labels: np.ndarray, old: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cluster means. Members are averaged relative to their first element so a
    cluster of identical points reproduces that point bit-exactly."""
    k, v = old.shape
    centers = old.copy()
    counts = np.bincount(labels, minlength=k)
    order = np.argsort(labels, kind="stable")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    anchors = np.zeros((k, v))
    nonempty = counts > 0
    anchors[nonempty] = x[order[starts[nonempty]]]
    offsets = np.zeros((k, v))
    np.add.at(offsets, labels, x - anchors[labels])
    centers[nonempty] = anchors[nonempty] + offsets[nonempty] / counts[nonempty, None]
    return centers, counts


def _repair_empty(x, labels, dist, centers, counts):
    """Re-seed each empty cluster at the farthest member of the worst cluster."""
    for e in np.flatnonzero(counts == 0):
        inertia = np.bincount(labels, weights=dist, minlength=centers.shape[0])
        worst = int(np.argmax(inertia))
        if inertia[worst] <= 0:
            centers[e] = centers[worst]
            continue
        members = np.flatnonzero(labels == worst)
        far = members[int(np.argmax(dist[members]))]
        centers[e] = x[far]
        labels[far] = e
        dist[far] = 0.0
        counts[worst] -= 1
        counts[e] = 1
    return centers


def fit_codebook(
    targets,
    k: int,
    metric_weights=None,
    iters: int = 50,
    tol: float = 1e-8,
    seed=0,
    check: bool = False,
) -> Codebook:
    """Weighted k-means with k-means++ seeding and Lloyd iterations.

    The distance is sum_j m_j (x_j - c_j)^2. When K is at least the number of
    distinct targets the codebook is an exact cover (the sorted distinct
    targets, padded with copies of the first) and the objective is zero. Empty
    clusters are re-seeded at the farthest member of the cluster with the largest
    inertia. A Lloyd step that would raise the objective through rounding noise
    is discarded and fitting stops, so the objective history never increases.

    Args:
        targets: (n, v) points.
        k: codebook size, >= 1.
        metric_weights: (v,) positive weights, default all ones.
        iters: maximum Lloyd iterations.
        tol: stop when the relative objective decrease falls below this.
        seed: anything accepted by ``numpy.random.default_rng``.
        check: raise InvariantError if the objective ever increases.

    Raises:
        ValidationError: on empty or non-finite targets, or k < 1.
    """
    x = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError(f"targets must be a non-empty (n, v) array, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("targets contain non-finite values")
    if k < 1:
        raise ValidationError(f"codebook size must be >= 1, got {k}")
    w = _check_weights(metric_weights, x.shape[1])

    distinct = np.unique(x, axis=0)
    if k >= distinct.shape[0]:
        extra = np.repeat(distinct[:1], k - distinct.shape[0], axis=0)
        return Codebook(np.vstack([distinct, extra]), w, 0.0, (0.0,))

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, w, rng)
    labels, dist = assign(x, centers, w)
    obj = float(dist.sum())
    history = [obj]
    for _ in range(iters):
        if obj == 0.0:
            break
        new_centers, counts = _update(x, labels, centers)
        if np.any(counts == 0):
            diff = x - new_centers[labels]
            own = (diff * diff) @ w
            new_centers = _repair_empty(x, labels.copy(), own, new_centers, counts.copy())
        new_labels, new_dist = assign(x, new_centers, w)
        new_obj = float(new_dist.sum())
        if new_obj > obj:
            if check and new_obj > obj * (1 + 1e-12):
                raise InvariantError(f"k-means objective increased from {obj} to {new_obj}")
            break
        rel = (obj - new_obj) / obj
        centers, labels, obj = new_centers, new_labels, new_obj
        history.append(obj)
        if rel < tol:
            break
    return Codebook(centers, w, obj, tuple(history))


def encode(targets, codebook: Codebook) -> np.ndarray:
    """Index of the nearest centroid for each target, ties to the lowest index."""
    x = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.centroids.shape[1]:
        raise ValidationError(f"targets shape {x.shape} incompatible with codebook {codebook.centroids.shape}")
    labels, _ = assign(x, codebook.centroids, codebook.metric_weights)
    return labels


def decode(q: QuantizedTensor) -> np.ndarray:
    """Rebuild the M x N matrix from an artifact, stripping row padding."""
    width = q.cols + q.pad
    out = np.empty((q.rows, width))
    for g in q.groups:
        if g.indices.size and (g.indices.min() < 0 or g.indices.max() >= g.k):
            raise ValidationError("index out of codebook range")
        out[g.channels] = g.codebook[g.indices].reshape(g.channels.size, width)
    return out[:, : q.cols]


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@contextmanager
def _stage(name: str):
    try:
        yield
    except RsavqError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


def thread_count() -> int:
    """Worker threads for per-group fitting, capped by RSAVQ_THREADS."""
    env = os.environ.get("RSAVQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ValidationError(f"RSAVQ_THREADS must be an integer, got {env!r}") from exc
    return min(4, os.cpu_count() or 1)


def descent_direction(natgrad: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Negative natural gradient rescaled to the RMS magnitude of ``w``.

    The rescaling makes lambda a fraction of the typical weight size, which is
    independent of the arbitrary overall scale of the Kronecker factors.
    """
    rms_n = float(np.sqrt(np.mean(natgrad * natgrad)))
    if rms_n == 0.0:
        return np.zeros_like(natgrad)
    return -natgrad * (float(np.sqrt(np.mean(w * w))) / rms_n)


def group_metric_weights(fim, channels, cols: int, v: int) -> np.ndarray:
    """Diagonal Fisher weights for one group's vectors, normalized to mean one.

    Entry (c, j) of the Kronecker diagonal is (F_O[c,c] + d_O)(F_I[j,j] + d_I).
    Weights are averaged per vector coordinate over the group's vectors,
    skipping padded coordinates.
    """
    d_out = np.diag(fim.f_out)[np.asarray(channels)] + fim.damping_out
    d_in = np.diag(fim.f_in) + fim.damping_in
    full = np.outer(d_out, d_in)
    pad = padding(cols, v)
    full = np.pad(full, ((0, 0), (0, pad)), constant_values=np.nan).reshape(-1, v)
    valid = ~np.isnan(full)
    counts = valid.sum(axis=0)
    sums = np.where(valid, full, 0.0).sum(axis=0)
    fallback = sums.sum() / counts.sum()
    weights = np.where(counts > 0, sums / np.maximum(counts, 1), fallback)
    return weights / weights.mean()


def quantize_matrix(w, bundle: GradientBundle, cfg: QuantizeConfig | None = None):
    """Run the full pipeline on one weight matrix.

    Stages: Kronecker FIM, natural gradient of the mean gradient, channel
    energies, integer bit allocation with B_max = Round(target_bits * M),
    grouping, then per group K = 2^round(b_g v) codewords fitted on shifted
    targets and encoded. With ``lam == 0`` the natural gradient is never computed.

    Returns:
        ``(QuantizedTensor, SensitivityProfile)``.

    Raises:
        RsavqError subclasses, with the failing stage prefixed in brackets.
    """
    cfg = cfg or QuantizeConfig()
    with _stage("input"):
        w = check_matrix(w, "weights")
        if bundle.shape != w.shape:
            raise ValidationError(f"gradient shape {bundle.shape} does not match weights {w.shape}")
    m, n = w.shape
    v = cfg.vector_length
    with _stage("fim"):
        fim = estimate_kronecker_fim(bundle)
        mean_grad = bundle.mean()
    with _stage("sensitivity"):
        energies = channel_sensitivity(mean_grad, ChannelMetric.from_fim(fim))
    with _stage("allocation"):
        if cfg.group_count > m:
            raise ValidationError(f"group_count {cfg.group_count} exceeds the {m} channels")
        budget = bit_budget(cfg.target_bits, m)
        rule = "uniform" if cfg.allocation == "uniform" else cfg.allocation_rule
        alloc = allocate_bits(energies, budget, True, rule)
        groups = group_channels(energies, alloc.bits, cfg.group_count, budget)
        profile = SensitivityProfile(energies, alloc.bits, budget, tuple(groups), alloc.fallback, rule)
    with _stage("projection"):
        views = reshape_to_vectors(w, [g.channels for g in groups], v)
        if cfg.lam > 0:
            direction = descent_direction(natural_gradient(fim, mean_grad).matrix, w)
            views = build_targets(views, direction, cfg.lam)

    def fit(gi: int) -> GroupBlock:
        group, view = groups[gi], views[gi]
        k = codebook_size(group.bits, v)
        if cfg.metric_mode == "fisher-diagonal":
            mw = group_metric_weights(fim, group.channels, n, v)
        else:
            mw = np.ones(v)
        book = fit_codebook(
            view.targets, k, mw, cfg.kmeans_iters, cfg.kmeans_tol, np.random.SeedSequence([cfg.seed, gi])
        )
        idx = encode(view.targets, book)
        return GroupBlock(np.asarray(group.channels), group.bits, book.centroids, idx)

    with _stage("codebook"):
        workers = min(thread_count(), len(groups))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                blocks = list(pool.map(fit, range(len(groups))))
        else:
            blocks = [fit(gi) for gi in range(len(groups))]
    with _stage("assemble"):
        q = QuantizedTensor(m, n, v, padding(n, v), bundle.digest, tuple(blocks))
    return q, profile

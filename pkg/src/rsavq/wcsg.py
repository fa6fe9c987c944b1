"""Channel sensitivity, bit allocation and sensitivity-ordered grouping.

Each output channel c gets a curvature energy I_c = 0.5 g_c^T F_c^{-1} g_c. Bits
are then spread over channels to minimize sum_c (I_c + 1) 2^(-2 b_c) under a
total budget, and channels are chunked into groups that share one bit-width.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import InfeasibleError, NumericError, ValidationError
from .fim import KroneckerFim
from .tensorio import round_half_up

log = logging.getLogger(__name__)

ALLOCATION_RULES = ("lagrangian", "log-ratio", "uniform")
MIN_BITS = 1


@dataclass(frozen=True, eq=False)
class ChannelMetric:
    """Per-channel metric F_c = (F_O[c, c] + d_O) (F_I + d_I I)."""

    f_in: np.ndarray
    f_out_diag: np.ndarray
    damping_out: float
    damping_in: float

    def __post_init__(self):
        f_in = np.asarray(self.f_in, dtype=np.float64)
        diag = np.asarray(self.f_out_diag, dtype=np.float64)
        if f_in.ndim != 2 or f_in.shape[0] != f_in.shape[1]:
            raise ValidationError(f"f_in must be square, got {f_in.shape}")
        if diag.ndim != 1 or np.any(diag < 0) or not np.all(np.isfinite(diag)):
            raise ValidationError("f_out_diag must be a finite non-negative vector")
        object.__setattr__(self, "f_in", f_in)
        object.__setattr__(self, "f_out_diag", diag)

    @classmethod
    def from_fim(cls, fim: KroneckerFim) -> "ChannelMetric":
        return cls(fim.f_in, np.clip(np.diag(fim.f_out), 0.0, None), fim.damping_out, fim.damping_in)

    def channel_matrix(self, c: int) -> np.ndarray:
        n = self.f_in.shape[0]
        return (self.f_out_diag[c] + self.damping_out) * (self.f_in + self.damping_in * np.eye(n))


def channel_sensitivity(mean_grad, metric: ChannelMetric) -> np.ndarray:
    """Curvature energy I_c = 0.5 g_c^T F_c^{-1} g_c for every row c.

    Raises:
        ValidationError: on shape mismatch.
        NumericError: if the damped input factor is not positive definite.
    """
    g = np.asarray(mean_grad, dtype=np.float64)
    m, n = g.shape
    if metric.f_in.shape != (n, n) or metric.f_out_diag.shape != (m,):
        raise ValidationError(
            f"gradient {g.shape} incompatible with metric f_in {metric.f_in.shape}, "
            f"f_out_diag {metric.f_out_diag.shape}"
        )
    b = metric.f_in + metric.damping_in * np.eye(n)
    try:
        cf = cho_factor(b, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NumericError("input factor is singular even after damping; try a larger damping") from exc
    solved = cho_solve(cf, g.T, check_finite=False)
    quad = np.einsum("cj,jc->c", g, solved)
    scale = metric.f_out_diag + metric.damping_out
    if np.any(scale <= 0):
        raise NumericError("a channel has zero output curvature and zero damping")
    return np.maximum(0.5 * quad / scale, 0.0)


@dataclass(frozen=True, eq=False)
class BitAllocation:
    """Result of :func:`allocate_bits`.

    Attributes:
        bits: allocated bits per channel.
        raw: the continuous allocation before rounding.
        fallback: True when all energies were zero and uniform bits were used.
    """

    bits: np.ndarray
    raw: np.ndarray
    fallback: bool = False


def _water_fill(shifted: np.ndarray, budget: float, lo: float, hi: float) -> np.ndarray:
    """Minimize sum s_c 2^(-2 b_c) s.t. sum b_c = budget, lo <= b_c <= hi.

    Stationarity gives b_c = clip(mu + 0.5 log2 s_c, lo, hi); mu is found by
    bisection and then solved exactly on the final active set.
    """
    h = 0.5 * np.log2(shifted)
    finite_hi = hi if np.isfinite(hi) else lo + budget
    a, b = lo - h.max() - 1.0, finite_hi - h.min() + 1.0
    for _ in range(200):
        mu = 0.5 * (a + b)
        if np.clip(mu + h, lo, hi).sum() < budget:
            a = mu
        else:
            b = mu
    mu = 0.5 * (a + b)
    bits = np.clip(mu + h, lo, hi)
    free = (mu + h > lo) & (mu + h < hi)
    if free.any():
        fixed = bits[~free].sum()
        mu = (budget - fixed - h[free].sum()) / free.sum()
        bits[free] = mu + h[free]
    return bits


def _round_and_repair(raw: np.ndarray, budget: int, lo: float, hi: float, rank: np.ndarray) -> np.ndarray:
    bits = np.clip(round_half_up(raw), lo, hi)
    resid = raw - bits
    r = int(budget - bits.sum())
    while r != 0:
        if r > 0:
            order = np.lexsort((rank, -resid))
            cand = [c for c in order if bits[c] + 1 <= hi]
        else:
            order = np.lexsort((-rank, resid))
            cand = [c for c in order if bits[c] - 1 >= lo]
        if not cand:
            raise InfeasibleError(f"cannot repair allocation to budget {budget} within [{lo}, {hi}]")
        step = 1 if r > 0 else -1
        c = cand[0]
        bits[c] += step
        resid[c] -= step
        r -= step
    return bits


def allocate_bits(
    energies,
    budget: float,
    integer_mode: bool = True,
    rule: str = "lagrangian",
    min_bits: float = MIN_BITS,
    max_bits: float | None = None,
) -> BitAllocation:
    """Distribute ``budget`` bits across channels.

    Energies are shifted by +1 first. The ``lagrangian`` rule is the exact
    minimizer of the global distortion, b_c = mu + 0.5 log2(I_c + 1) clipped to
    the bit range. ``log-ratio`` uses b_c = B log2(I_c + 1) / sum log2(I_c + 1).
    ``uniform`` ignores the energies.

    In integer mode the raw values are rounded half-up and then repaired one bit
    at a time until they sum to ``budget``. Bits go to the channels whose raw
    value lost the most to rounding, and are taken from those that gained the
    most. Ties favour the more sensitive channel (descending energy, then
    ascending index), which keeps the result monotone in the energies.

    Raises:
        ValidationError: on negative energies, a non-positive budget or an
            unknown rule.
        InfeasibleError: if the budget cannot be met inside [min_bits, max_bits].
    """
    e = np.asarray(energies, dtype=np.float64)
    if e.ndim != 1 or e.size == 0:
        raise ValidationError("energies must be a non-empty vector")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValidationError("energies must be finite and non-negative")
    if not budget > 0:
        raise ValidationError(f"budget must be positive, got {budget}")
    if rule not in ALLOCATION_RULES:
        raise ValidationError(f"unknown allocation rule {rule!r}; choose from {ALLOCATION_RULES}")
    lo = float(min_bits)
    hi = float("inf") if max_bits is None else float(max_bits)
    c = e.size
    if integer_mode:
        if budget != round_half_up(budget):
            raise ValidationError(f"integer-mode budget must be a whole number, got {budget}")
        budget = int(budget)
    if budget < c * lo or budget > c * hi:
        raise InfeasibleError(f"budget {budget} outside [{c * lo}, {c * hi}] for {c} channels")

    shifted = e + 1.0
    fallback = bool(np.all(e == 0))
    if fallback and rule != "uniform":
        log.warning("all channel energies are zero; falling back to uniform allocation")
    if rule == "uniform" or fallback:
        raw = np.full(c, budget / c)
    elif rule == "lagrangian":
        raw = _water_fill(shifted, budget, lo, hi)
    else:
        logs = np.log2(shifted)
        raw = budget * logs / logs.sum()
    if integer_mode:
        rank = np.empty(c, dtype=np.int64)
        rank[sensitivity_order(e)] = np.arange(c)
        bits = _round_and_repair(raw, budget, lo, hi, rank)
    else:
        bits = raw.copy()
    return BitAllocation(bits=bits, raw=raw, fallback=fallback)


def sensitivity_order(energies) -> np.ndarray:
    """Channel ids by descending energy, ties by ascending id."""
    e = np.asarray(energies, dtype=np.float64)
    return np.lexsort((np.arange(e.size), -e))


@dataclass(frozen=True)
class ChannelGroup:
    channels: tuple[int, ...]
    bits: float


def group_channels(
    energies,
    bits,
    group_count: int,
    budget: float | None = None,
    min_bits: float = MIN_BITS,
    max_bits: float | None = None,
) -> list[ChannelGroup]:
    """Chunk channels by descending sensitivity and give each chunk one bit-width.

    Chunks have size n = ceil(M / G); the last may be smaller, and when M is not
    a multiple of n fewer than G chunks can result. Each group gets
    b_g = Round(mean member bits). If ``budget`` is given, group bits are then
    nudged by +-1 until sum_g b_g |G_g| equals it. Additions go to the most
    sensitive groups first and removals come from the least sensitive first. A
    group is only nudged if its size fits in the remaining residual, so a
    residual smaller than every group size is left in place.

    Returns:
        Groups in descending-sensitivity order; channel ids inside a group are sorted.

    Raises:
        ValidationError: if ``group_count`` is outside [1, M] or shapes disagree.
    """
    e = np.asarray(energies, dtype=np.float64)
    b = np.asarray(bits, dtype=np.float64)
    m = e.size
    if b.shape != e.shape:
        raise ValidationError(f"bits shape {b.shape} does not match energies shape {e.shape}")
    if not 1 <= group_count <= m:
        raise ValidationError(f"group_count must be in [1, {m}], got {group_count}")
    order = sensitivity_order(e)
    n = -(-m // group_count)
    chunks = [order[i * n : (i + 1) * n] for i in range(group_count) if i * n < m]
    gbits = [float(round_half_up(b[ch].mean())) for ch in chunks]
    if budget is not None:
        lo = float(min_bits)
        hi = float("inf") if max_bits is None else float(max_bits)
        sizes = [len(ch) for ch in chunks]
        resid = float(budget) - sum(g * s for g, s in zip(gbits, sizes))
        progress = True
        while resid != 0 and progress:
            progress = False
            walk = range(len(chunks)) if resid > 0 else reversed(range(len(chunks)))
            for gi in walk:
                step = 1.0 if resid > 0 else -1.0
                if sizes[gi] <= abs(resid) and lo <= gbits[gi] + step <= hi:
                    gbits[gi] += step
                    resid -= step * sizes[gi]
                    progress = True
                    break
    return [ChannelGroup(tuple(int(c) for c in np.sort(ch)), g) for ch, g in zip(chunks, gbits)]


def global_distortion(energies, bits) -> float:
    """sum_c (I_c + 1) 2^(-2 b_c)."""
    e = np.asarray(energies, dtype=np.float64)
    b = np.asarray(bits, dtype=np.float64)
    if e.shape != b.shape:
        raise ValidationError(f"energies {e.shape} and bits {b.shape} differ in shape")
    return float(np.sum((e + 1.0) * np.exp2(-2.0 * b)))


@dataclass(frozen=True, eq=False)
class SensitivityProfile:
    """Everything the bit-allocation stage decided for one matrix."""

    energies: np.ndarray
    bits: np.ndarray
    budget: float
    groups: tuple[ChannelGroup, ...]
    fallback: bool = False
    rule: str = field(default="lagrangian")

    @property
    def shifted(self) -> np.ndarray:
        return self.energies + 1.0

    @property
    def avg_bits(self) -> float:
        return sum(g.bits * len(g.channels) for g in self.groups) / self.energies.size

    def global_distortion(self) -> float:
        return global_distortion(self.energies, self.bits)

    def to_dict(self) -> dict:
        return {
            "energies": [float(x) for x in self.energies],
            "bits": [float(x) for x in self.bits],
            "budget": float(self.budget),
            "groups": [{"channels": list(g.channels), "b_g": g.bits} for g in self.groups],
            "global_distortion": self.global_distortion(),
            "avg_bits": self.avg_bits,
            "rule": self.rule,
            "uniform_fallback": self.fallback,
        }


def bit_budget(target_bits: float, channels: int) -> int:
    """Integer budget B_max = Round(target_bits * M)."""
    return int(round_half_up(target_bits * channels))


def analyze(
    mean_grad,
    metric: ChannelMetric,
    target_bits: float,
    group_count: int,
    rule: str = "lagrangian",
    min_bits: float = MIN_BITS,
    max_bits: float | None = None,
) -> SensitivityProfile:
    """Energies, integer bit allocation and groups for one gradient/metric pair."""
    energies = channel_sensitivity(mean_grad, metric)
    budget = bit_budget(target_bits, energies.size)
    alloc = allocate_bits(energies, budget, True, rule, min_bits, max_bits)
    groups = group_channels(energies, alloc.bits, group_count, budget, min_bits, max_bits)
    return SensitivityProfile(energies, alloc.bits, budget, tuple(groups), alloc.fallback, rule)

"""Error metrics, the exhaustive bit-allocation oracle and the ablation harness."""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import toymodel
from .edsg import QuantizeConfig, decode, quantize_matrix
from .errors import InfeasibleError, RsavqError, ValidationError
from .fim import KroneckerFim, estimate_kronecker_fim, kl_quadratic
from .tensorio import GradientBundle, _atomic_write
from .wcsg import SensitivityProfile

AXES = ("lambda", "group_count", "vector_length", "components")
CSV_COLUMNS = ("setting", "loss_delta_calib", "loss_delta_holdout", "fisher_distortion", "euclid_mse", "avg_bits")
COMPONENT_SETTINGS = ("kmeans", "+edsg", "+edsg+wcsg")


@dataclass(frozen=True)
class Metrics:
    euclid_mse: float
    fisher_distortion: float
    kl_quadratic_value: float
    global_distortion: float


def metrics(w, w_hat, fim: KroneckerFim, profile: SensitivityProfile | None = None, dense_fim=None) -> Metrics:
    """Distortion measures of ``w_hat`` as an approximation of ``w``.

    ``fisher_distortion`` is 0.5 <E, E> under the Kronecker metric. The KL
    quadratic uses ``dense_fim`` when given and falls back to the Kronecker value.
    ``global_distortion`` depends only on the profile's bits (0 without a profile).
    """
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w.shape != w_hat.shape:
        raise ValidationError(f"shape mismatch: {w.shape} vs {w_hat.shape}")
    e = w - w_hat
    fd = kl_quadratic(e, fim)
    if dense_fim is not None:
        vec = e.ravel()
        klq = max(0.5 * float(vec @ np.asarray(dense_fim) @ vec), 0.0)
    else:
        klq = fd
    gd = profile.global_distortion() if profile is not None else 0.0
    return Metrics(float(np.mean(e * e)), fd, klq, gd)


def allocation_oracle(energies, budget: int, bit_choices: Sequence[int] = (1, 2, 3, 4, 5)) -> np.ndarray:
    """Exhaustive minimizer of sum (I_c + 1) 2^(-2 b_c) subject to sum b_c = budget.

    Allocations are scanned in lexicographic order and only a strictly better
    (by a relative 1e-12) value replaces the incumbent, so the lexicographically
    smallest optimum wins.

    Raises:
        ValidationError: if more than 6 channels or 5 bit choices are requested.
        InfeasibleError: if no allocation sums to ``budget``.
    """
    e = np.asarray(energies, dtype=np.float64)
    choices = sorted(set(int(b) for b in bit_choices))
    if e.size > 6 or len(choices) > 5:
        raise ValidationError("oracle limited to 6 channels and 5 bit choices")
    shifted = e + 1.0
    best, best_val = None, np.inf
    for combo in itertools.product(choices, repeat=e.size):
        if sum(combo) != budget:
            continue
        val = float(np.sum(shifted * np.exp2(-2.0 * np.asarray(combo, dtype=np.float64))))
        if best is None or val < best_val * (1 - 1e-12):
            best, best_val = combo, val
    if best is None:
        raise InfeasibleError(f"no allocation from {choices} sums to {budget} over {e.size} channels")
    return np.asarray(best, dtype=np.float64)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationPoint:
    setting: object
    loss_delta_calib: float
    loss_delta_holdout: float
    fisher_distortion: float
    euclid_mse: float
    avg_bits: float
    bits: tuple[float, ...] = field(default=(), compare=False)

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


@dataclass(frozen=True)
class AblationReport:
    axis: str
    points: tuple[AblationPoint, ...]
    config_snapshot: dict
    seed: int

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValidationError(f"unknown axis {self.axis!r}")
        if not self.points:
            raise ValidationError("ablation report needs at least one point")

    def point(self, setting) -> AblationPoint:
        for p in self.points:
            if p.setting == setting:
                return p
        raise KeyError(setting)

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "seed": self.seed,
            "config": self.config_snapshot,
            "points": [dict(zip(CSV_COLUMNS, p.row()), bits=list(p.bits)) for p in self.points],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for p in self.points:
            writer.writerow([p.setting] + [repr(float(x)) for x in p.row()[1:]])
        return buf.getvalue()


@dataclass
class EvalContext:
    """A task with its holdout split, gradient bundle and Kronecker FIM, computed once."""

    task: toymodel.ToyTask
    holdout: toymodel.ToyTask
    bundle: GradientBundle
    fim: KroneckerFim

    @classmethod
    def build(cls, task: toymodel.ToyTask) -> "EvalContext":
        bundle = toymodel.grad_samples(task, task.weight)
        return cls(task, toymodel.holdout(task), bundle, estimate_kronecker_fim(bundle))


def _context(task_or_ctx) -> EvalContext:
    return task_or_ctx if isinstance(task_or_ctx, EvalContext) else EvalContext.build(task_or_ctx)


def evaluate_config(ctx: EvalContext, cfg: QuantizeConfig, setting) -> AblationPoint:
    """Quantize the task weight under ``cfg`` and measure the result."""
    w = ctx.task.weight
    q, profile = quantize_matrix(w, ctx.bundle, cfg)
    w_hat = decode(q)
    m = metrics(w, w_hat, ctx.fim, profile)
    return AblationPoint(
        setting=setting,
        loss_delta_calib=toymodel.loss(ctx.task, w_hat) - toymodel.loss(ctx.task, w),
        loss_delta_holdout=toymodel.loss(ctx.holdout, w_hat) - toymodel.loss(ctx.holdout, w),
        fisher_distortion=m.fisher_distortion,
        euclid_mse=m.euclid_mse,
        avg_bits=q.avg_bits(),
        bits=tuple(float(g.bits) for g in q.groups),
    )


def run_components_ablation(task, cfg: QuantizeConfig) -> AblationReport:
    """Rows: plain k-means (lambda 0, uniform bits), +EDSG (uniform bits), full pipeline.

    All rows share the seed, the bit budget and the sensitivity-ordered group layout.
    """
    ctx = _context(task)
    variants = (
        replace(cfg, lam=0.0, allocation="uniform"),
        replace(cfg, allocation="uniform"),
        replace(cfg, allocation="wcsg"),
    )
    points = []
    for name, c in zip(COMPONENT_SETTINGS, variants):
        try:
            points.append(evaluate_config(ctx, c, name))
        except RsavqError as exc:
            raise type(exc)(f"row {name}: {exc}") from exc
    return AblationReport("components", tuple(points), cfg.to_dict(), cfg.seed)


_AXIS_FIELD = {"lambda": "lam", "group_count": "group_count", "vector_length": "vector_length"}


def run_sweep(task, cfg: QuantizeConfig, axis: str, values: Sequence) -> AblationReport:
    """One pipeline run per value of ``axis`` with everything else held fixed.

    Rows come out in ascending order of the value.

    Raises:
        ValidationError: for an unknown axis, no values or repeated values.
    """
    if axis not in _AXIS_FIELD:
        raise ValidationError(f"sweep axis must be one of {sorted(_AXIS_FIELD)}, got {axis!r}")
    vals = sorted(values)
    if not vals:
        raise ValidationError("sweep needs at least one value")
    if len(set(vals)) != len(vals):
        raise ValidationError("sweep values must be distinct")
    ctx = _context(task)
    points = []
    for val in vals:
        try:
            c = replace(cfg, **{_AXIS_FIELD[axis]: val})
            points.append(evaluate_config(ctx, c, val))
        except RsavqError as exc:
            raise type(exc)(f"row {axis}={val}: {exc}") from exc
    return AblationReport(axis, tuple(points), cfg.to_dict(), cfg.seed)


def run_seeds(task, cfg: QuantizeConfig, seeds: Sequence[int], axis: str = "components", values=None):
    """Repeat an ablation for every seed on a fixed task. Returns one report per seed."""
    ctx = _context(task)
    reports = []
    for s in seeds:
        c = replace(cfg, seed=int(s))
        if axis == "components":
            reports.append(run_components_ablation(ctx, c))
        else:
            reports.append(run_sweep(ctx, c, axis, values))
    return reports


def median_by_setting(reports: Sequence[AblationReport], column: str = "loss_delta_holdout") -> dict:
    settings = [p.setting for p in reports[0].points]
    return {s: float(np.median([getattr(r.point(s), column) for r in reports])) for s in settings}


def win_rate(reports: Sequence[AblationReport], better, worse, column: str = "loss_delta_holdout") -> float:
    """Fraction of seeds where ``better`` has a strictly lower value than ``worse``."""
    wins = [getattr(r.point(better), column) < getattr(r.point(worse), column) for r in reports]
    return float(np.mean(wins))


def summarize(reports: Sequence[AblationReport], column: str = "loss_delta_holdout") -> dict:
    return {
        "axis": reports[0].axis,
        "seeds": [r.seed for r in reports],
        "median": {str(k): v for k, v in median_by_setting(reports, column).items()},
    }


def median_report(reports: Sequence[AblationReport]) -> AblationReport:
    """Collapse per-seed reports into one whose numbers are per-setting medians."""
    first = reports[0]
    points = []
    for p in first.points:
        cols = {c: float(np.median([getattr(r.point(p.setting), c) for r in reports])) for c in CSV_COLUMNS[1:]}
        points.append(AblationPoint(p.setting, bits=p.bits, **cols))
    return AblationReport(first.axis, tuple(points), first.config_snapshot, first.seed)


def write_report(
    report: AblationReport, directory, fmt: str, stamp: str, per_seed: Sequence[AblationReport] | None = None
) -> list[Path]:
    """Write ``ablation_<axis>_<stamp>.csv`` and/or ``.json``; returns the paths.

    When ``per_seed`` is given the JSON also carries every seed's report.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    out = []
    if fmt in ("csv", "both"):
        path = root / f"ablation_{report.axis}_{stamp}.csv"
        _atomic_write(path, report.to_csv().encode())
        out.append(path)
    if fmt in ("json", "both"):
        path = root / f"ablation_{report.axis}_{stamp}.json"
        data = report.to_dict()
        if per_seed is not None:
            data["seeds"] = [r.seed for r in per_seed]
            data["per_seed"] = [r.to_dict()["points"] for r in per_seed]
        _atomic_write(path, (json.dumps(data, indent=2) + "\n").encode())
        out.append(path)
    return out

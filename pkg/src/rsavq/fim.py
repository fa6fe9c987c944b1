"""Kronecker-factored Fisher information and the metric operations built on it.

The Fisher matrix of an M x N weight is approximated as F ~ F_O (x) F_I with
F_O of size M x M and F_I of size N x N. With row-major vectorization,
(F_O (x) F_I) vec(X) = vec(F_O X F_I), so every operation here stays at the
size of the factors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import NumericError, ValidationError
from .tensorio import GradientBundle, _atomic_write, read_tensor, write_tensor

RELATIVE_DAMPING = 1e-4
# Used when a factor is identically zero and relative damping would vanish.
DAMPING_FLOOR = 1e-4


def relative_damping(factor: np.ndarray, scale: float = RELATIVE_DAMPING) -> float:
    """Damping proportional to the mean diagonal of ``factor``."""
    d = scale * float(np.mean(np.diag(factor)))
    return d if d > 0 else DAMPING_FLOOR


@dataclass(frozen=True, eq=False)
class KroneckerFim:
    """Fisher approximation F ~ F_O (x) F_I with per-factor diagonal damping.

    Attributes:
        f_out: (M, M) symmetric PSD output-channel factor.
        f_in: (N, N) symmetric PSD input factor.
        damping_out: added to the diagonal of ``f_out`` before inversion.
        damping_in: added to the diagonal of ``f_in`` before inversion.
    """

    f_out: np.ndarray
    f_in: np.ndarray
    damping_out: float
    damping_in: float

    def __post_init__(self):
        for name in ("f_out", "f_in"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
                raise ValidationError(f"{name} must be a non-empty square matrix, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"{name} contains non-finite entries")
            scale = max(np.abs(a).max(), np.finfo(float).tiny)
            if np.abs(a - a.T).max() > 1e-12 * scale:
                raise ValidationError(f"{name} is not symmetric")
            a = a.copy()
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        for name in ("damping_out", "damping_in"):
            d = float(getattr(self, name))
            if not np.isfinite(d) or d < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {d}")
            object.__setattr__(self, name, d)

    @property
    def shape(self) -> tuple[int, int]:
        return self.f_out.shape[0], self.f_in.shape[0]

    def damped_factors(self) -> tuple[np.ndarray, np.ndarray]:
        m, n = self.shape
        return self.f_out + self.damping_out * np.eye(m), self.f_in + self.damping_in * np.eye(n)


@dataclass(frozen=True, eq=False)
class NaturalGradient:
    """The preconditioned gradient F^{-1} g. Negate it for a descent step."""

    matrix: np.ndarray
    damping_out: float
    damping_in: float


def estimate_kronecker_fim(bundle: GradientBundle, damping: float | None = None) -> KroneckerFim:
    """Estimate Kronecker factors from per-sample gradients.

    F_I = (1/M) mean_s G_s^T G_s and F_O = (1/N) mean_s G_s G_s^T, each
    symmetrized as (A + A^T)/2.

    Args:
        bundle: per-sample gradients, each M x N.
        damping: absolute damping applied to both factors. ``None`` selects
            1e-4 times the mean diagonal of each factor separately.
    """
    g = bundle.samples
    s, m, n = g.shape
    f_in = np.zeros((n, n))
    f_out = np.zeros((m, m))
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(s):
            f_in += g[i].T @ g[i]
            f_out += g[i] @ g[i].T
            if not (np.all(np.isfinite(f_in)) and np.all(np.isfinite(f_out))):
                raise NumericError(f"non-finite Fisher accumulation at gradient sample {i}")
    f_in /= s * m
    f_out /= s * n
    f_in = 0.5 * (f_in + f_in.T)
    f_out = 0.5 * (f_out + f_out.T)
    if damping is None:
        d_out, d_in = relative_damping(f_out), relative_damping(f_in)
    else:
        d_out = d_in = float(damping)
    return KroneckerFim(f_out, f_in, d_out, d_in)


def _cholesky(a: np.ndarray, which: str):
    try:
        return cho_factor(a, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NumericError(
            f"{which} factor is not positive definite after damping; try a larger damping"
        ) from exc


def damped_inverse_apply(fim: KroneckerFim, g) -> NaturalGradient:
    """Solve (F_O + d_O I) X (F_I + d_I I) = g for X.

    Both factors are Cholesky-factorized; no explicit inverse is formed.

    Raises:
        ValidationError: if ``g`` does not match the factor sizes.
        NumericError: if a damped factor is not positive definite.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != fim.shape:
        raise ValidationError(f"gradient shape {g.shape} does not match FIM shape {fim.shape}")
    a, b = fim.damped_factors()
    ca = _cholesky(a, "output")
    cb = _cholesky(b, "input")
    x = cho_solve(ca, g, check_finite=False)
    x = cho_solve(cb, x.T, check_finite=False).T
    if not np.all(np.isfinite(x)):
        raise NumericError("natural gradient has non-finite entries; try a larger damping")
    return NaturalGradient(x, fim.damping_out, fim.damping_in)


natural_gradient = damped_inverse_apply


def _check_pair(a, b, fim: KroneckerFim) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != fim.shape or b.shape != fim.shape:
        raise ValidationError(f"shapes {a.shape} and {b.shape} must both equal {fim.shape}")
    return a, b


def fisher_inner(a, b, fim: KroneckerFim) -> float:
    """Fisher inner product vec(a)^T (F_O (x) F_I) vec(b) with undamped factors."""
    a, b = _check_pair(a, b, fim)
    return float(np.sum(a * (fim.f_out @ b @ fim.f_in)))


def fisher_norm(a, fim: KroneckerFim) -> float:
    return float(np.sqrt(max(fisher_inner(a, a, fim), 0.0)))


def kl_quadratic(dw, fim: KroneckerFim) -> float:
    """Second-order KL estimate 0.5 <dw, dw>_F, clipped at zero."""
    return max(0.5 * fisher_inner(dw, dw, fim), 0.0)


def save_fim(fim: KroneckerFim, directory) -> None:
    """Write ``f_out.rsqt``, ``f_in.rsqt`` and a ``fim.json`` damping sidecar."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_tensor(fim.f_out, root / "f_out.rsqt")
    write_tensor(fim.f_in, root / "f_in.rsqt")
    sidecar = {"damping": [fim.damping_out, fim.damping_in]}
    _atomic_write(root / "fim.json", (json.dumps(sidecar) + "\n").encode())


def load_fim(directory) -> KroneckerFim:
    """Inverse of :func:`save_fim`. A scalar ``damping`` applies to both factors."""
    root = Path(directory)
    f_out = read_tensor(root / "f_out.rsqt")
    f_in = read_tensor(root / "f_in.rsqt")
    damping = json.loads((root / "fim.json").read_text())["damping"]
    if np.isscalar(damping):
        damping = [damping, damping]
    return KroneckerFim(0.5 * (f_out + f_out.T), 0.5 * (f_in + f_in.T), *map(float, damping))

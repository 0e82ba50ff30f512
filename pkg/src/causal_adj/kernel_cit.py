"""Kernel-based conditional independence test.

Gaussian Gram matrices are centered, the conditioning set is regressed out
with a ridge residual operator ``R = eps * (Kz + eps I)^-1`` and the
statistic is ``T = tr(Kxz|z @ Ky|z) / n``. Two null approximations are
available: a moment-matched two-parameter gamma and a row-shuffle
permutation test.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import linalg, stats
from scipy.spatial.distance import pdist, squareform

from .errors import (
    NonFiniteInput,
    SampleCountMismatch,
    SingularMatrix,
    TooFewSamples,
)

logger = logging.getLogger(__name__)

MIN_VALID_SAMPLES = 20


@dataclass(frozen=True)
class CitConfig:
    """Settings for :func:`kcit`.

    ``kernel_size`` is accepted for config compatibility only and is not
    used by the test.
    """

    kernel_width: float = 0.8
    ridge_epsilon: float = 1e-3
    pvalue_method: Literal["gamma", "permutation"] = "gamma"
    n_permutations: int = 1000
    width_rule: Literal["fixed", "median_heuristic"] = "fixed"
    standardize: bool = True
    kernel_size: float = 10.0

    def __post_init__(self):
        if not self.kernel_width > 0:
            raise ValueError("kernel_width must be > 0")
        if not self.ridge_epsilon > 0:
            raise ValueError("ridge_epsilon must be > 0")
        if self.pvalue_method not in ("gamma", "permutation"):
            raise ValueError(f"unknown pvalue_method {self.pvalue_method!r}")
        if self.width_rule not in ("fixed", "median_heuristic"):
            raise ValueError(f"unknown width_rule {self.width_rule!r}")
        if self.n_permutations < 100:
            raise ValueError("n_permutations must be >= 100")

    @classmethod
    def from_dict(cls, d: dict) -> "CitConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class CitResult:
    statistic: float
    p_value: float
    n_samples: int
    method: str
    degenerate: bool = False


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    elif a.ndim != 2:
        a = a.reshape(a.shape[0], -1)
    return a


def gaussian_gram(samples, width: float) -> np.ndarray:
    """Gaussian kernel matrix ``exp(-|x_i - x_j|^2 / (2 width^2))``."""
    x = _as_2d(samples)
    if x.shape[0] < 2:
        raise TooFewSamples("gaussian_gram needs at least 2 rows")
    if not width > 0:
        raise ValueError("width must be > 0")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("samples contain NaN or Inf")
    sq = squareform(pdist(x, "sqeuclidean"))
    return np.exp(-sq / (2.0 * width * width))


def median_width(samples) -> float:
    """Median pairwise distance divided by sqrt(2); falls back to 1."""
    d = pdist(_as_2d(samples))
    d = d[d > 0]
    if d.size == 0:
        return 1.0
    return float(np.median(d) / np.sqrt(2.0))


def center_gram(K) -> np.ndarray:
    """Return ``H K H`` with ``H = I - 11^T / n``."""
    K = np.asarray(K, dtype=np.float64)
    row = K.mean(axis=1, keepdims=True)
    col = K.mean(axis=0, keepdims=True)
    return K - row - col + K.mean()


def conditional_residual(Kz, ridge_epsilon: float) -> np.ndarray:
    """Ridge residual operator ``eps * (Kz + eps I)^-1``.

    Solved through a Cholesky factorization rather than an explicit inverse.
    """
    Kz = np.asarray(Kz, dtype=np.float64)
    n = Kz.shape[0]
    if not ridge_epsilon > 0:
        raise ValueError("ridge_epsilon must be > 0")
    A = 0.5 * (Kz + Kz.T) + ridge_epsilon * np.eye(n)
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularMatrix(f"Kz + eps I is not positive definite: {exc}") from exc
    R = ridge_epsilon * linalg.cho_solve(factor, np.eye(n))
    return 0.5 * (R + R.T)


def _standardize(a: np.ndarray) -> np.ndarray:
    sd = a.std(axis=0)
    sd[sd == 0] = 1.0
    return (a - a.mean(axis=0)) / sd


def _width(samples: np.ndarray, cfg: CitConfig) -> float:
    if cfg.width_rule == "median_heuristic":
        return median_width(samples)
    return cfg.kernel_width


def _is_constant(a: np.ndarray) -> bool:
    return bool(np.any(np.ptp(a, axis=0) == 0))


def gamma_pvalue(A: np.ndarray, B: np.ndarray, statistic: float, conditional: bool = False) -> float:
    """Upper tail of the moment-matched gamma null for ``statistic``.

    The moments describe ``tr(A B)``, i.e. ``n`` times the reported
    statistic. Unconditional: mean ``tr(A) tr(B) / n`` and variance
    ``2 tr(A^2) tr(B^2) / n^2``. Conditional: residualized rows are not
    exchangeable, so the per-sample leverages are kept, giving mean
    ``sum_t A_tt B_tt`` and variance ``2 |A o B|_F^2`` (``o`` elementwise).
    """
    n = A.shape[0]
    if conditional:
        AB = A * B
        mean = float(np.sum(np.diag(AB)))
        var = 2.0 * float(np.sum(AB * AB))
    else:
        mean = np.trace(A) * np.trace(B) / n
        var = 2.0 * np.sum(A * A) * np.sum(B * B) / n**2
    if not (mean > 0 and var > 0):
        return 1.0
    shape = mean**2 / var
    scale = var / mean
    return float(stats.gamma.sf(n * statistic, a=shape, scale=scale))


def kcit(x, y, z=None, cfg: CitConfig = CitConfig(), seed=None) -> CitResult:
    """Test ``x _||_ y | z``.

    Parameters
    ----------
    x, y : array (n,) or (n, d)
    z : array (n, d_z), optional
        Conditioning set. ``None`` or zero columns gives the unconditional
        test (``R = I``).
    cfg : CitConfig
    seed : int or numpy Generator, optional
        Only used by the permutation method.
    """
    x = _as_2d(x)
    y = _as_2d(y)
    n = x.shape[0]
    if y.shape[0] != n:
        raise SampleCountMismatch(f"x has {n} rows, y has {y.shape[0]}")
    if z is not None:
        z = _as_2d(z)
        if z.shape[0] != n:
            raise SampleCountMismatch(f"x has {n} rows, z has {z.shape[0]}")
        if z.shape[1] == 0:
            z = None
    if n < 4:
        raise TooFewSamples(f"kcit needs at least 4 samples, got {n}")
    if n < MIN_VALID_SAMPLES:
        logger.warning("kcit with n=%d < %d samples; p-values unreliable", n, MIN_VALID_SAMPLES)
    for name, a in (("x", x), ("y", y), ("z", z)):
        if a is not None and not np.all(np.isfinite(a)):
            raise NonFiniteInput(f"{name} contains NaN or Inf")

    if _is_constant(x) or _is_constant(y):
        return CitResult(0.0, 1.0, n, cfg.pvalue_method, degenerate=True)

    if cfg.standardize:
        x, y = _standardize(x), _standardize(y)
        z = None if z is None else _standardize(z)

    xz = x if z is None else np.hstack([x, z])
    Kxz = center_gram(gaussian_gram(xz, _width(xz, cfg)))
    Ky = center_gram(gaussian_gram(y, _width(y, cfg)))
    if z is None:
        R = None
        A, B = Kxz, Ky
    else:
        Kz = center_gram(gaussian_gram(z, _width(z, cfg)))
        R = conditional_residual(Kz, cfg.ridge_epsilon)
        A = R @ Kxz @ R
        B = R @ Ky @ R
    statistic = max(float(np.sum(A * B)) / n, 0.0)

    if cfg.pvalue_method == "gamma":
        p = gamma_pvalue(A, B, statistic, conditional=R is not None)
    else:
        p = _permutation_pvalue(A, Ky, R, statistic, cfg.n_permutations, seed)
    return CitResult(statistic, min(max(p, 0.0), 1.0), n, cfg.pvalue_method)


def _permutation_pvalue(A, Ky, R, statistic, n_perm, seed) -> float:
    # Shuffling the rows of y permutes the centered Gram symmetrically, so
    # tr(A R P Ky P^T R) = sum(G * Ky[p][:, p]) with G = R A R.
    rng = np.random.default_rng(seed)
    n = A.shape[0]
    G = A if R is None else R @ A @ R
    tol = 1e-12 * max(abs(statistic), 1.0)
    exceed = 0
    for _ in range(n_perm):
        p = rng.permutation(n)
        if np.sum(G * Ky[np.ix_(p, p)]) / n >= statistic - tol:
            exceed += 1
    return (1.0 + exceed) / (1.0 + n_perm)

"""Kernels and the biased (V-statistic) squared-MMD estimator.

Samples are matrix rows. ``mmd_sq`` includes diagonal self-pairs, so
``mmd_sq(spec, X, X).value`` is exactly zero. Gradients are taken with
respect to the second sample set only, the one owned by the student.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .tensor import NORM_EPS, as_matrix, row_l2_normalize, row_norms

LINEAR = "linear"
POLY = "poly"
GAUSSIAN = "gaussian"
FAMILIES = (LINEAR, POLY, GAUSSIAN)

SIGMA_SQ_FLOOR = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyperparameters.

    ``degree``/``offset`` apply to the polynomial kernel. For the Gaussian
    kernel, ``sigma_sq=None`` selects the adaptive bandwidth (mean squared
    distance over all pooled pairs, recomputed per call); a number fixes it.
    """

    family: str = POLY
    degree: int = 2
    offset: float = 0.0
    sigma_sq: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if self.family == POLY and self.degree < 1:
            raise ValueError(f"polynomial degree must be >= 1, got {self.degree}")
        if self.family == GAUSSIAN and self.sigma_sq is not None and not self.sigma_sq > 0:
            raise ValueError(f"fixed Gaussian bandwidth must be > 0, got {self.sigma_sq}")

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls(LINEAR)

    @classmethod
    def poly(cls, degree: int = 2, offset: float = 0.0) -> "KernelSpec":
        return cls(POLY, degree=degree, offset=offset)

    @classmethod
    def gaussian(cls, sigma_sq: Optional[float] = None) -> "KernelSpec":
        return cls(GAUSSIAN, sigma_sq=sigma_sq)


@dataclass
class MmdResult:
    value: float
    grad_y: Optional[np.ndarray] = None
    sigma_sq_used: Optional[float] = None


def kernel_eval(spec: KernelSpec, x, y, sigma_sq: Optional[float] = None) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"kernel arguments must be equal-length vectors, got {x.shape} and {y.shape}")
    if spec.family == LINEAR:
        return float(x @ y)
    if spec.family == POLY:
        return float((x @ y + spec.offset) ** spec.degree)
    if sigma_sq is None:
        sigma_sq = spec.sigma_sq
    if sigma_sq is None or not sigma_sq > 0:
        raise ValueError(f"Gaussian kernel needs a positive bandwidth, got {sigma_sq}")
    diff = x - y
    return float(np.exp(-(diff @ diff) / (2.0 * sigma_sq)))


def mean_pairwise_sq_distance(x_rows, y_rows) -> float:
    """Mean squared distance over all unordered pairs of the pooled rows, floored at 1e-12."""
    x_rows = as_matrix(x_rows)
    y_rows = as_matrix(y_rows)
    if x_rows.shape[1] != y_rows.shape[1]:
        raise ValueError(f"column mismatch: {x_rows.shape[1]} vs {y_rows.shape[1]}")
    pooled = np.vstack([x_rows, y_rows])
    if pooled.shape[0] < 2:
        raise ValueError("need at least 2 pooled rows to define a pairwise bandwidth")
    return max(float(np.mean(pdist(pooled, "sqeuclidean"))), SIGMA_SQ_FLOOR)


def kernel_matrix(spec: KernelSpec, a: np.ndarray, b: np.ndarray, sigma_sq: Optional[float] = None) -> np.ndarray:
    if spec.family == LINEAR:
        return a @ b.T
    if spec.family == POLY:
        return (a @ b.T + spec.offset) ** spec.degree
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * sigma_sq))


def _kernel_grad_sum(spec, a, b, sigma_sq, k_ab):
    """Row i holds sum_j d k(a_i, b_j) / d a_i."""
    if spec.family == LINEAR:
        return np.tile(b.sum(axis=0), (a.shape[0], 1))
    if spec.family == POLY:
        dk = spec.degree * (a @ b.T + spec.offset) ** (spec.degree - 1)
        return dk @ b
    # d/da exp(-|a-b|^2 / 2s) = -k (a - b) / s
    return -(k_ab.sum(axis=1)[:, None] * a - k_ab @ b) / sigma_sq


def mmd_sq(spec: KernelSpec, x_rows, y_rows, want_grad_y: bool = False) -> MmdResult:
    """Biased squared MMD between the row sets of ``x_rows`` and ``y_rows``.

    When ``want_grad_y`` is set, ``grad_y`` is the derivative with respect to
    every entry of ``y_rows``. An adaptive Gaussian bandwidth is held constant
    for that derivative.
    """
    x = as_matrix(x_rows)
    y = as_matrix(y_rows)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"column mismatch: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ValueError("both sample sets need at least one row")
    n, m = x.shape[0], y.shape[0]

    sigma_sq = None
    if spec.family == GAUSSIAN:
        sigma_sq = spec.sigma_sq if spec.sigma_sq is not None else mean_pairwise_sq_distance(x, y)

    k_xx = kernel_matrix(spec, x, x, sigma_sq)
    k_yy = kernel_matrix(spec, y, y, sigma_sq)
    k_yx = kernel_matrix(spec, y, x, sigma_sq)
    value = k_xx.sum() / n**2 + k_yy.sum() / m**2 - 2.0 * k_yx.sum() / (n * m)

    grad = None
    if want_grad_y:
        # Symmetric kernel: the yy double sum contributes twice the first-slot derivative.
        grad = (2.0 / m**2) * _kernel_grad_sum(spec, y, y, sigma_sq, k_yy)
        grad -= (2.0 / (n * m)) * _kernel_grad_sum(spec, y, x, sigma_sq, k_yx)
    return MmdResult(float(value), grad, sigma_sq)


def normalize_backward(f: np.ndarray, grad_normed: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. row-normalized ``f`` back to ``f`` itself.

    Rows that the normalization zeroed out receive zero gradient.
    """
    norms = row_norms(f)
    out = np.zeros_like(f)
    ok = norms >= NORM_EPS
    u = f[ok] / norms[ok, None]
    g = grad_normed[ok]
    radial = np.einsum("ij,ij->i", g, u)
    out[ok] = (g - radial[:, None] * u) / norms[ok, None]
    return out


def mmd_sq_normalized(spec: KernelSpec, f_t, f_s, want_grad_s: bool = False) -> MmdResult:
    """Squared MMD between the l2-normalized rows of ``f_t`` and ``f_s``.

    The gradient, when requested, is with respect to the raw ``f_s``.
    """
    f_t = as_matrix(f_t)
    f_s = as_matrix(f_s)
    if f_t.shape[1] != f_s.shape[1]:
        raise ValueError(f"column mismatch: {f_t.shape[1]} vs {f_s.shape[1]}")
    res = mmd_sq(spec, row_l2_normalize(f_t), row_l2_normalize(f_s), want_grad_s)
    if want_grad_s:
        res.grad_y = normalize_backward(f_s, res.grad_y)
    return res

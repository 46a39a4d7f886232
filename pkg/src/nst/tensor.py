"""Dense numeric core.

A ``Matrix`` is a 2-D float64 ``numpy.ndarray`` and a ``Batch4`` is a 4-D
float64 array in N-C-H-W layout. Everything here is a pure function over
those arrays.
"""

from __future__ import annotations

import numpy as np

# Rows whose l2 norm falls below this are treated as all-zero.
NORM_EPS = 1e-12


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def as_batch4(x) -> np.ndarray:
    b = np.asarray(x, dtype=np.float64)
    if b.ndim != 4:
        raise ValueError(f"expected an N-C-H-W batch, got shape {b.shape}")
    if b.shape[2] < 1 or b.shape[3] < 1:
        raise ValueError(f"spatial dims must be >= 1, got {b.shape[2:]}")
    return b


def matmul(a, b) -> np.ndarray:
    """Matrix product accumulated left-to-right over the inner index.

    The accumulation order is fixed, so results are bit-identical across
    runs and platforms (unlike BLAS, which may block or reorder).
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def row_norms(f) -> np.ndarray:
    f = as_matrix(f)
    return np.sqrt(np.einsum("ij,ij->i", f, f))


def row_l2_normalize(f) -> np.ndarray:
    """Divide each row by its Euclidean norm; near-zero rows become zero rows."""
    f = as_matrix(f)
    norms = row_norms(f)
    out = np.zeros_like(f)
    ok = norms >= NORM_EPS
    out[ok] = f[ok] / norms[ok, None]
    return out


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align_corners=False: output pixel i samples source coordinate
    # (i + 0.5) * n_in / n_out - 0.5, clamped to the valid range.
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        w[i, i0] += 1.0 - frac
        w[i, i1] += frac
    return w


def bilinear_resize(x, out_h: int, out_w: int) -> np.ndarray:
    """Per-channel bilinear resize of an N-C-H-W batch (align_corners=False)."""
    x = as_batch4(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    rh = _interp_matrix(h, out_h)
    rw = _interp_matrix(w, out_w)
    return np.einsum("ph,nchw,qw->ncpq", rh, x, rw)

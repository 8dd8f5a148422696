"""Float32 tensor kernels with a pinned accumulation order.

Every matrix product in this package goes through :func:`matmul`, which
accumulates each inner product strictly in ascending index order, rounding
to float32 after every multiply and every add.  Pinning the order (instead
of leaving it to a BLAS) is what makes two differently-scheduled executions
of the same arithmetic bitwise comparable, and it makes results independent
of how rows are batched together.

All kernels take and return 2-D float32 arrays ("matrices") unless noted.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


class ShapeError(ValueError):
    """Raised when kernel operands have incompatible shapes or dtypes."""


def _check_matrix(name: str, m: np.ndarray) -> None:
    if not isinstance(m, np.ndarray) or m.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D ndarray, got {getattr(m, 'shape', type(m))}")
    if m.dtype != np.float32:
        raise ShapeError(f"{name} must be float32, got {m.dtype}")


@njit(cache=True)
def _matmul_f32(a, b):  # pragma: no cover - exercised through matmul()
    m, kdim = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for k in range(kdim):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float32 multiply-round-add-round per k step.

    The inner product over k runs in ascending index order; no FMA, no
    reassociation.  Row i of the output depends only on row i of ``a``,
    so stacking or splitting rows never changes the bits.
    """
    _check_matrix("a", a)
    _check_matrix("b", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return _matmul_f32(a, b)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float32; subtracts the row max before exponentiating."""
    _check_matrix("m", m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@njit(cache=True)
def _gelu_f32(m):  # pragma: no cover - exercised through gelu()
    out = np.empty_like(m)
    src = m.ravel()
    dst = out.ravel()
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    for i in range(src.size):
        x = float(src[i])
        phi = 0.5 * (1.0 + math.erf(x * inv_sqrt2))
        dst[i] = np.float32(x * phi)
    return out


def gelu(m: np.ndarray) -> np.ndarray:
    """Exact Gaussian-CDF GELU, x * Phi(x); Phi evaluated in float64 via erf."""
    _check_matrix("m", m)
    return _gelu_f32(np.ascontiguousarray(m))


def relu(m: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0)."""
    _check_matrix("m", m)
    return np.maximum(m, np.float32(0.0))


def layer_norm(m: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-row normalization with population variance, then affine gamma/beta.

    Statistics are computed in float64 per row and the result is rounded
    back to float32, so each row's output is independent of the batch.
    """
    _check_matrix("m", m)
    if gamma.shape != (m.shape[1],) or beta.shape != (m.shape[1],):
        raise ShapeError(f"gamma/beta must have shape ({m.shape[1]},)")
    x = m.astype(np.float64)
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    normed = (x - mean) / np.sqrt(var + eps)
    return (normed * gamma.astype(np.float64) + beta.astype(np.float64)).astype(np.float32)


def top_k_indices(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, by descending value then ascending index."""
    if v.ndim != 1:
        raise ShapeError(f"v must be 1-D, got shape {v.shape}")
    if not 0 < k <= v.shape[0]:
        raise ShapeError(f"k must be in [1, {v.shape[0]}], got {k}")
    return np.argsort(-v, kind="stable")[:k]

"""Dense float64 array operations: the fixed op vocabulary of the engine.

Tensors are plain C-contiguous ``numpy.float64`` arrays of rank <= 4. All
arithmetic happens in 64-bit; the 32-bit storage format is widened on load.
These are the value-level ops; differentiable counterparts live in
:mod:`tcma.autodiff`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DomainError, ShapeError

MAX_RANK = 4
NORM_FLOOR = 1e-12


def as_tensor(x, *, name: str = "tensor") -> np.ndarray:
    """Coerce to a float64 C-order array and validate the rank/extent contract."""
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"{name}: rank {arr.ndim} exceeds the supported maximum {MAX_RANK}")
    if any(e <= 0 for e in arr.shape):
        raise ShapeError(f"{name}: extents must be positive, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, *, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: contains non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product of two rank-2 tensors."""
    a = as_tensor(a, name="matmul lhs")
    b = as_tensor(b, name="matmul rhs")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects two matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def mean_axis(x, axis: int) -> np.ndarray:
    """Arithmetic mean along ``axis``; the axis is dropped from the output."""
    x = as_tensor(x)
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"mean_axis: axis {axis} invalid for rank-{x.ndim} tensor")
    return x.mean(axis=axis)


def l2_normalize(x, axis: int = -1, floor: float = NORM_FLOOR) -> np.ndarray:
    """Scale slices along ``axis`` to unit L2 norm; norms below ``floor`` are
    clamped to ``floor`` before dividing, so zero vectors pass through as zero."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"l2_normalize: axis {axis} invalid for rank-{x.ndim} tensor")
    norms = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    return x / np.maximum(norms, floor)


def softmax_temp(s, tau: float) -> np.ndarray:
    """Temperature softmax of a vector, computed with max-subtraction."""
    s = as_tensor(s, name="softmax scores")
    if s.ndim != 1:
        raise ShapeError(f"softmax_temp expects a vector, got shape {s.shape}")
    if not tau > 0:
        raise DomainError(f"softmax_temp: temperature must be positive, got {tau}")
    z = s / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def softplus(x):
    """log(1 + exp(x)) with the overflow-safe branch for large x."""
    x = np.asarray(x, dtype=np.float64)
    # exp never sees a positive argument, so no overflow on either branch
    out = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))
    if out.ndim == 0:
        return float(out)
    return out


def topk_indices(scores, k: int) -> list[int]:
    """Indices of the k largest scores, in ascending index order.

    Ties are broken toward the lower index via a stable sort.
    """
    scores = as_tensor(scores, name="topk scores")
    if scores.ndim != 1:
        raise ShapeError(f"topk_indices expects a vector, got shape {scores.shape}")
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ShapeError(f"topk_indices: k={k} out of range for n={n}")
    order = np.argsort(-scores, kind="stable")
    return sorted(int(i) for i in order[:k])


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element."""
    if not h > 0:
        raise DomainError(f"finite_diff_grad: step must be positive, got {h}")
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad

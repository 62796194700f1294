"""Dense float64 kernels that every other module builds on.

All operations are pure functions: inputs are never mutated and results are
fresh arrays. Everything runs in float64 so the analytical identities the
test suite asserts hold at machine precision, and every reduction uses a
fixed order, so repeated runs produce bit-identical results.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = [
    "as_tensor",
    "matmul",
    "softmax_rows",
    "mean_over_tokens",
    "l2_norm",
    "rowwise_l2",
]


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a C-contiguous float64 array, rejecting non-finite values."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product of a (m, k) and b (k, n)."""
    a = as_tensor(a, "left operand")
    b = as_tensor(b, "right operand")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise ValueError("matmul result overflowed to non-finite values")
    return out


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax of an (m, n) matrix with per-row max subtraction.

    Each output row is non-negative and sums to 1 within 1e-12; the max
    subtraction makes the result stable and invariant under per-row
    constant logit shifts.
    """
    x = as_tensor(x, "logits")
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise ValueError(f"softmax_rows: empty dimension in shape {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mean_over_tokens(x) -> np.ndarray:
    """Arithmetic mean over the token (row) axis of an (s, d) block, kept 2D."""
    x = as_tensor(x, "token block")
    if x.ndim != 2:
        raise ShapeError(f"mean_over_tokens expects an (s, d) block, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("mean_over_tokens: no tokens to average")
    return x.mean(axis=0, keepdims=True)


def l2_norm(x) -> float:
    """Euclidean norm of the flattened tensor."""
    x = as_tensor(x)
    return float(np.sqrt(np.sum(x * x)))


def rowwise_l2(x) -> np.ndarray:
    """Per-token Euclidean norms of an (s, d) block, returned as (s, 1)."""
    x = as_tensor(x, "token block")
    if x.ndim != 2:
        raise ShapeError(f"rowwise_l2 expects an (s, d) block, got shape {x.shape}")
    return np.sqrt(np.sum(x * x, axis=1, keepdims=True))

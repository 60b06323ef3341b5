"""Dense float32 kernels used by the toy transformer and the feature projector.

Tensors are plain row-major ``numpy`` arrays of dtype float32.  A 2-D array is
a ``(rows, cols)`` matrix; head-batched 3-D arrays are laid out as
``(heads, seq_len, head_dim)``.
"""

from __future__ import annotations

import numpy as np

F32 = np.float32
F64 = np.float64

NORM_EPS = 1e-6
ROPE_BASE = 10000.0


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x, ndim: int | None = None) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array, validating rank and finiteness."""
    arr = np.ascontiguousarray(x, dtype=F32)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-D tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` with float64 accumulation, returned as float32.

    Works for 2-D operands and for stacks of matrices (leading batch dims
    broadcast as in ``numpy.matmul``).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(F64, copy=False), b.astype(F64, copy=False))
    return out.astype(F32)


def softmax_rows(scores: np.ndarray, causal_mask: bool = False) -> np.ndarray:
    """Row-wise softmax over the last axis.

    With ``causal_mask`` set, entry ``(i, j)`` with ``j > i`` is excluded
    before normalization, so row ``i`` only spans columns ``0..i``.  Works on
    ``(rows, cols)`` and on ``(..., rows, cols)`` stacks.
    """
    s = np.asarray(scores, dtype=F64)
    if s.ndim < 2:
        raise ShapeError(f"softmax_rows needs at least 2 dims, got {s.shape}")
    if causal_mask:
        rows, cols = s.shape[-2:]
        allowed = np.tril(np.ones((rows, cols), dtype=bool))
        s = np.where(allowed, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    e /= e.sum(axis=-1, keepdims=True)
    return e.astype(F32)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    x64 = np.asarray(x, dtype=F64)
    gain = np.asarray(gain)
    if gain.ndim != 1 or gain.shape[0] != x64.shape[-1]:
        raise ShapeError(f"gain length {gain.shape} does not match width {x64.shape[-1]}")
    inv = 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    return (x64 * inv * gain.astype(F64)).astype(F32)


def rope_angles(positions: np.ndarray, head_dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Angle table ``pos * base**(-2i/head_dim)`` of shape ``(len(positions), head_dim // 2)``."""
    if head_dim % 2:
        raise ShapeError(f"rotary embedding needs an even head dimension, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=F64) / head_dim)
    return np.asarray(positions, dtype=F64)[:, None] * inv_freq[None, :]


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    x64 = x.astype(F64)
    even = x64[..., 0::2]
    odd = x64[..., 1::2]
    out = np.empty_like(x64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out.astype(F32)


def rotary_embed(q: np.ndarray, k: np.ndarray, positions, base: float = ROPE_BASE):
    """Rotate each (even, odd) channel pair of ``q`` and ``k`` by ``pos * theta_i``.

    ``q`` and ``k`` are ``(heads, seq_len, head_dim)``; ``positions`` has one
    entry per sequence row.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q/k head dims differ: {q.shape} vs {k.shape}")
    positions = np.asarray(positions)
    if positions.shape[0] != q.shape[-2] or positions.shape[0] != k.shape[-2]:
        raise ShapeError("positions must have one entry per sequence row")
    ang = rope_angles(positions, q.shape[-1], base)
    cos, sin = np.cos(ang), np.sin(ang)
    return _rotate(q, cos, sin), _rotate(k, cos, sin)

"""Dense numerics shared by the model code.

Matrices are plain numpy arrays. Every function accepts optional leading batch
dimensions, so ``(T, d)`` and ``(B, T, d)`` inputs both work; the trailing two
axes are the matrix.
"""

from __future__ import annotations

import numpy as np

from .errors import MaskError, ShapeError

RMS_EPS = 1e-6

PRECISIONS = {"f32": np.float32, "f64": np.float64}


def as_dtype(precision: str | np.dtype | type) -> np.dtype:
    if isinstance(precision, str) and precision in PRECISIONS:
        return np.dtype(PRECISIONS[precision])
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {precision!r}")
    return dt


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_softmax_masked(scores: np.ndarray, allowed: np.ndarray | None) -> np.ndarray:
    """Softmax over the last axis with disallowed entries forced to exactly 0.

    ``allowed=None`` means every entry is allowed. Disallowed scores are
    replaced by -inf before the row max is taken, so the max is over allowed
    entries only.
    """
    if allowed is not None:
        if allowed.shape != scores.shape[-allowed.ndim:]:
            raise ShapeError(f"mask {allowed.shape} does not match scores {scores.shape}")
        if not allowed.any(axis=-1).all():
            raise MaskError("fully masked row: every query must attend to at least one key")
        scores = np.where(allowed, scores, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"gain {gain.shape} does not match width {x.shape[-1]}")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return (x * inv.astype(x.dtype, copy=False)) * gain


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def frozen(a: np.ndarray) -> np.ndarray:
    """Return ``a`` marked read-only (no copy when already contiguous)."""
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a

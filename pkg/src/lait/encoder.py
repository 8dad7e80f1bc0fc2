"""Pre-norm T5-style encoder layers runnable over any contiguous layer range.

Activations are ``(T, d_model)`` for one sequence or ``(B, T, d_model)`` for a
batch of equal-length sequences sharing one mask and position vector.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .model import LayerWeights, ModelWeights
from .tensor import matmul, relu, rms_norm, row_softmax_masked


@dataclass
class AttentionCounter:
    """Running total of allowed (query, key) pairs, summed over layers.

    Heads are not multiplied in: one pair counts once per layer, which is the
    unit the analytic cost model uses.
    """

    pairs: int = 0
    calls: int = 0

    def add(self, n: int) -> None:
        self.pairs += int(n)
        self.calls += 1


def relative_position_bucket(offsets: np.ndarray, n_buckets: int = 32, max_distance: int = 128) -> np.ndarray:
    """Bidirectional T5 bucketing of ``key_pos - query_pos`` offsets.

    Half the buckets serve positive offsets. Within a direction, offsets below
    ``n_buckets // 4`` get their own bucket; larger ones share log-spaced
    buckets, and everything at or beyond ``max_distance`` lands in the last one.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    half = n_buckets // 2
    max_exact = half // 2
    base = np.where(offsets > 0, half, 0)
    n = np.abs(offsets)
    scaled = np.log(np.maximum(n, 1) / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
    large = np.minimum(max_exact + scaled.astype(np.int64), half - 1)
    return base + np.where(n < max_exact, n, large)


@functools.lru_cache(maxsize=512)
def _bucket_grid(pos_bytes: bytes, n_buckets: int, max_distance: int) -> np.ndarray:
    p = np.frombuffer(pos_bytes, dtype=np.int64)
    grid = relative_position_bucket(p[None, :] - p[:, None], n_buckets, max_distance)
    grid.setflags(write=False)
    return grid


def relative_position_bias(q_positions, k_positions, table: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Per-head additive bias of shape ``(n_heads, len(q), len(k))``."""
    if table.shape != (config.rel_buckets, config.n_heads):
        raise ShapeError(f"bias table {table.shape} != {(config.rel_buckets, config.n_heads)}")
    q = np.asarray(q_positions, dtype=np.int64)
    k = np.asarray(k_positions, dtype=np.int64)
    buckets = relative_position_bucket(k[None, :] - q[:, None], config.rel_buckets, config.rel_max_distance)
    return np.moveaxis(table[buckets], -1, 0)


def sinusoidal_positions(positions, d_model: int, dtype=np.float32) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, i / d_model)
    out = np.zeros((pos.shape[0], d_model))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return out.astype(dtype)


def embed(token_ids, weights: ModelWeights, positions=None) -> np.ndarray:
    """Token embeddings, plus sinusoids of ``positions`` under ``sinusoidal-local``."""
    ids = np.asarray(token_ids, dtype=np.int64)
    cfg = weights.config
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ShapeError(f"token id out of range for vocab_size={cfg.vocab_size}")
    x = weights.embedding[ids]
    if cfg.pos_scheme == "sinusoidal-local":
        if positions is None:
            positions = np.arange(ids.shape[-1])
        x = x + sinusoidal_positions(positions, cfg.d_model, x.dtype)
    return x


def _split_heads(t: np.ndarray, n_heads: int) -> np.ndarray:
    *lead, T, d = t.shape
    return t.reshape(*lead, T, n_heads, d // n_heads).swapaxes(-2, -3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    *lead, H, T, dh = t.shape
    return t.swapaxes(-2, -3).reshape(*lead, T, H * dh)


def _check_inputs(x: np.ndarray, allowed, positions) -> int:
    T = x.shape[-2]
    if len(positions) != T:
        raise ShapeError(f"{len(positions)} positions for {T} tokens")
    if allowed is not None and allowed.shape != (T, T):
        raise ShapeError(f"mask {allowed.shape} does not match {T} tokens")
    return T


def multi_head_attention(
    x: np.ndarray,
    allowed: np.ndarray | None,
    positions,
    lw: LayerWeights,
    cfg: ModelConfig,
    counter: AttentionCounter | None = None,
    tape: dict | None = None,
) -> np.ndarray:
    """Masked multi-head self-attention. ``allowed=None`` is the full mask."""
    T = _check_inputs(x, allowed, positions)
    q = _split_heads(matmul(x, lw.wq), cfg.n_heads)
    k = _split_heads(matmul(x, lw.wk), cfg.n_heads)
    v = _split_heads(matmul(x, lw.wv), cfg.n_heads)
    scale = x.dtype.type(1.0 / math.sqrt(cfg.d_head))
    scores = (q @ k.swapaxes(-1, -2)) * scale
    buckets = None
    if cfg.pos_scheme == "relative-bucket":
        pos_bytes = np.ascontiguousarray(positions, dtype=np.int64).tobytes()
        buckets = _bucket_grid(pos_bytes, cfg.rel_buckets, cfg.rel_max_distance)
        scores = scores + np.moveaxis(lw.rel_bias[buckets], -1, 0)
    attn = row_softmax_masked(scores, allowed)
    ctx = _merge_heads(attn @ v)
    out = matmul(ctx, lw.wo)
    if counter is not None:
        per_seq = T * T if allowed is None else int(np.count_nonzero(allowed))
        counter.add(per_seq * int(np.prod(x.shape[:-2], dtype=np.int64)))
    if tape is not None:
        tape.update(q=q, k=k, v=v, attn=attn, ctx=ctx, buckets=buckets, scale=scale)
    return out


def feed_forward(x: np.ndarray, lw: LayerWeights) -> np.ndarray:
    return matmul(relu(matmul(x, lw.w1)), lw.w2)


def encoder_layer(
    x: np.ndarray,
    allowed: np.ndarray | None,
    positions,
    lw: LayerWeights,
    cfg: ModelConfig,
    counter: AttentionCounter | None = None,
    tape: dict | None = None,
) -> np.ndarray:
    n1 = rms_norm(x, lw.ln1)
    y = x + multi_head_attention(n1, allowed, positions, lw, cfg, counter, tape)
    n2 = rms_norm(y, lw.ln2)
    pre = matmul(n2, lw.w1)
    h = relu(pre)
    z = y + matmul(h, lw.w2)
    if tape is not None:
        tape.update(x=x, n1=n1, y=y, n2=n2, pre=pre, h=h, allowed=allowed)
    return z


def run_layers(
    x: np.ndarray,
    allowed: np.ndarray | None,
    positions,
    weights: ModelWeights,
    from_layer: int,
    to_layer: int,
    counter: AttentionCounter | None = None,
    tapes: list | None = None,
) -> np.ndarray:
    """Apply layers ``[from_layer, to_layer)`` in order with one mask and one
    position vector. An empty range returns ``x`` unchanged.

    When ``tapes`` is a list, one dict of intermediates per layer is appended.
    """
    cfg = weights.config
    if not 0 <= from_layer <= to_layer <= cfg.n_layers:
        raise ConfigError(f"bad layer range [{from_layer}, {to_layer}) for L={cfg.n_layers}")
    if x.shape[-1] != cfg.d_model:
        raise ShapeError(f"activation width {x.shape[-1]} != d_model {cfg.d_model}")
    for i in range(from_layer, to_layer):
        tape = None
        if tapes is not None:
            tape = {"layer": i}
            tapes.append(tape)
        x = encoder_layer(x, allowed, positions, weights.layers[i], cfg, counter, tape)
    return x

"""Reverse-mode gradients for the segmented encoder plus classifier head.

The forward pass here is the same arithmetic as :func:`lait.pipeline.lait_encode`
(segment stacks, concatenation, joint stack) but runs a whole batch of
examples sharing one segment-length profile at once and keeps per-layer tapes.
Gradients are plain ``{tensor_name: array}`` dicts keyed like
:meth:`ModelWeights.tensors`.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .encoder import _merge_heads, _split_heads, embed, run_layers
from .model import ModelWeights
from .pipeline import SegmentedExample
from .tensor import RMS_EPS

Gradients = dict


def _rms_backward(dn: np.ndarray, x: np.ndarray, gain: np.ndarray):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    xh = x / r
    dgain = (dn * xh).reshape(-1, x.shape[-1]).sum(axis=0)
    dxh = dn * gain
    dx = (dxh - xh * np.mean(dxh * xh, axis=-1, keepdims=True)) / r
    return dx, dgain


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def layer_backward(dz: np.ndarray, tape: dict, weights: ModelWeights, grads: dict) -> np.ndarray:
    """Backprop one encoder layer; accumulates parameter grads into ``grads``
    and returns the gradient with respect to the layer input."""
    cfg = weights.config
    i = tape["layer"]
    lw = weights.layers[i]
    pfx = f"layers.{i}."

    # feed-forward branch: z = y + relu(n2 @ w1) @ w2
    grads[pfx + "w2"] += _flat(tape["h"]).T @ _flat(dz)
    dpre = (dz @ lw.w2.T) * (tape["pre"] > 0)
    grads[pfx + "w1"] += _flat(tape["n2"]).T @ _flat(dpre)
    dy_norm, dg2 = _rms_backward(dpre @ lw.w1.T, tape["y"], lw.ln2)
    grads[pfx + "ln2"] += dg2
    dy = dz + dy_norm

    # attention branch: y = x + attn(n1)
    grads[pfx + "wo"] += _flat(tape["ctx"]).T @ _flat(dy)
    dctx = _split_heads(dy @ lw.wo.T, cfg.n_heads)
    attn, q, k, v = tape["attn"], tape["q"], tape["k"], tape["v"]
    dattn = dctx @ v.swapaxes(-1, -2)
    dv = attn.swapaxes(-1, -2) @ dctx
    dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    if tape["buckets"] is not None:
        per_head = dscores.reshape(-1, *dscores.shape[-3:]).sum(axis=0)  # (H, T, T)
        dtable = np.zeros_like(lw.rel_bias)
        np.add.at(dtable, tape["buckets"], np.moveaxis(per_head, 0, -1))
        grads[pfx + "rel_bias"] += dtable
    dscores = dscores * tape["scale"]
    dq = _merge_heads(dscores @ k)
    dk = _merge_heads(dscores.swapaxes(-1, -2) @ q)
    dv = _merge_heads(dv)
    n1 = _flat(tape["n1"])
    grads[pfx + "wq"] += n1.T @ _flat(dq)
    grads[pfx + "wk"] += n1.T @ _flat(dk)
    grads[pfx + "wv"] += n1.T @ _flat(dv)
    dn1 = dq @ lw.wq.T + dk @ lw.wk.T + dv @ lw.wv.T
    dx_norm, dg1 = _rms_backward(dn1, tape["x"], lw.ln1)
    grads[pfx + "ln1"] += dg1
    return dy + dx_norm


def zero_grads(weights: ModelWeights) -> Gradients:
    return {name: np.zeros_like(a) for name, a in weights.tensors()}


@dataclass
class BatchForward:
    logits: np.ndarray  # (B, n_labels)
    pooled: np.ndarray
    token_ids: list  # per segment, (B, len_i)
    seg_tapes: list  # per segment, list of layer tapes
    joint_tapes: list
    seg_lengths: list


def forward_batch(weights: ModelWeights, token_ids: list[np.ndarray], keep_tapes: bool = True) -> BatchForward:
    """``token_ids[i]`` is a ``(B, len_i)`` array holding segment ``i`` of every example."""
    cfg = weights.config
    P, L = cfg.n_parallel, cfg.n_layers
    reps, seg_tapes = [], []
    for ids in token_ids:
        pos = np.arange(ids.shape[-1])
        tapes = [] if keep_tapes else None
        reps.append(run_layers(embed(ids, weights, pos), None, pos, weights, 0, P, tapes=tapes))
        seg_tapes.append(tapes)
    x = np.concatenate(reps, axis=-2)
    joint_tapes = [] if keep_tapes else None
    out = run_layers(x, None, np.arange(x.shape[-2]), weights, P, L, tapes=joint_tapes)
    pooled = out.mean(axis=-2)
    logits = pooled @ weights.head.w + weights.head.b
    return BatchForward(logits, pooled, token_ids, seg_tapes, joint_tapes, [ids.shape[-1] for ids in token_ids])


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-example softmax cross-entropy."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    return logz - shifted[np.arange(len(targets)), targets]


def backward_batch(fw: BatchForward, targets: np.ndarray, weights: ModelWeights, scale: float,
                   grads: Gradients) -> None:
    """Accumulate ``scale * d(sum of per-example losses)`` into ``grads``."""
    B = fw.logits.shape[0]
    dlogits = (_softmax(fw.logits) - np.eye(fw.logits.shape[1], dtype=fw.logits.dtype)[targets]) * scale
    grads["head.w"] += fw.pooled.T @ dlogits
    grads["head.b"] += dlogits.sum(axis=0)
    m = sum(fw.seg_lengths)
    dpooled = dlogits @ weights.head.w.T
    dx = np.broadcast_to((dpooled / m)[:, None, :], (B, m, dpooled.shape[-1])).astype(fw.logits.dtype)
    for tape in reversed(fw.joint_tapes):
        dx = layer_backward(dx, tape, weights, grads)
    start = 0
    for ids, tapes, n in zip(fw.token_ids, fw.seg_tapes, fw.seg_lengths):
        dseg = dx[:, start:start + n]
        start += n
        for tape in reversed(tapes):
            dseg = layer_backward(dseg, tape, weights, grads)
        np.add.at(grads["embedding"], ids.reshape(-1), dseg.reshape(-1, dseg.shape[-1]))


def group_by_profile(examples: list[SegmentedExample]) -> dict[tuple[int, ...], list[int]]:
    groups: dict[tuple[int, ...], list[int]] = defaultdict(list)
    for i, ex in enumerate(examples):
        groups[tuple(len(s) for s in ex.segments)].append(i)
    return groups


def stack_segments(examples: list[SegmentedExample]) -> list[np.ndarray]:
    n = examples[0].n_segments
    return [np.array([ex.segments[i] for ex in examples], dtype=np.int64) for i in range(n)]


def batch_logits(weights: ModelWeights, examples: list[SegmentedExample]) -> np.ndarray:
    """Logits for every example, in input order, without keeping tapes."""
    out = np.empty((len(examples), len(weights.head.labels)), dtype=weights.dtype)
    for idx in group_by_profile(examples).values():
        fw = forward_batch(weights, stack_segments([examples[i] for i in idx]), keep_tapes=False)
        out[idx] = fw.logits
    return out

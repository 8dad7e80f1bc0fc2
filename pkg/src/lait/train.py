"""Synthetic two-segment tasks, gradient checking, Adam and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backprop import (
    Gradients,
    backward_batch,
    batch_logits,
    cross_entropy,
    forward_batch,
    group_by_profile,
    stack_segments,
    zero_grads,
)
from .config import EOS_ID, N_RESERVED_IDS, ModelConfig
from .errors import ConfigError, TrainingDiverged
from .model import ModelWeights, init_weights
from .pipeline import SegmentedExample, make_example

log = logging.getLogger(__name__)

TASK_LABELS = {
    "copy_vs_shuffle": ("same", "diff"),
    "shared_token": ("no", "yes"),
}


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "copy_vs_shuffle"
    seq_len: int = 8
    vocab: int = 50
    n_train: int = 4096
    n_eval: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_LABELS:
            raise ConfigError(f"unknown synthetic task {self.kind!r}")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2 (copy_vs_shuffle needs a non-identity permutation)")
        if self.vocab - N_RESERVED_IDS < 2:
            raise ConfigError("vocab must leave at least two non-reserved ids")
        if self.kind == "shared_token" and 2 * self.seq_len > self.vocab - N_RESERVED_IDS:
            raise ConfigError("shared_token needs vocab >= 2 * seq_len + 2 for disjoint negatives")

    @property
    def labels(self) -> tuple[str, ...]:
        return TASK_LABELS[self.kind]


@dataclass
class SyntheticDataset:
    spec: SyntheticTaskSpec
    train: list[SegmentedExample]
    eval: list[SegmentedExample]


def _copy_vs_shuffle(rng: np.random.Generator, spec: SyntheticTaskSpec, label: str):
    while True:
        first = rng.integers(N_RESERVED_IDS, spec.vocab, size=spec.seq_len)
        if len(set(first.tolist())) > 1:
            break
    if label == "same":
        return first, first.copy()
    # a non-identity permutation can still reproduce the sequence when ids repeat
    while True:
        second = first[rng.permutation(spec.seq_len)]
        if not np.array_equal(second, first):
            return first, second


def _shared_token(rng: np.random.Generator, spec: SyntheticTaskSpec, label: str):
    ids = np.arange(N_RESERVED_IDS, spec.vocab)
    first = rng.choice(ids, size=spec.seq_len, replace=True)
    rest = np.setdiff1d(ids, first)
    second = rng.choice(rest, size=spec.seq_len, replace=True)
    if label == "yes":
        second[rng.integers(spec.seq_len)] = first[rng.integers(spec.seq_len)]
    return first, second


def _make_split(rng: np.random.Generator, spec: SyntheticTaskSpec, n: int) -> list[SegmentedExample]:
    labels = [spec.labels[i % 2] for i in range(n)]
    rng.shuffle(labels)
    draw = _copy_vs_shuffle if spec.kind == "copy_vs_shuffle" else _shared_token
    out = []
    for lab in labels:
        a, b = draw(rng, spec, lab)
        out.append(make_example([list(a) + [EOS_ID], list(b) + [EOS_ID]], lab, spec.kind))
    return out


def gen_synthetic(spec: SyntheticTaskSpec) -> SyntheticDataset:
    """Deterministic given ``spec.seed``; each split has floor/ceil n/2 per label.

    Segments are ``seq_len`` random ids followed by EOS, mirroring tokenizer
    output. ``copy_vs_shuffle``: the second segment is the first one copied
    ("same") or permuted into a different sequence ("diff").
    ``shared_token``: "yes" iff the segments share at least one id.
    """
    rng = np.random.default_rng(spec.seed)
    return SyntheticDataset(spec, _make_split(rng, spec, spec.n_train), _make_split(rng, spec, spec.n_eval))


def _targets(weights: ModelWeights, examples: Sequence[SegmentedExample]) -> np.ndarray:
    head = weights.head
    if head is None:
        raise ConfigError("weights have no classifier head")
    out = []
    for ex in examples:
        if ex.label is None:
            raise ValueError("example has no label")
        out.append(head.label_index(ex.label))
    return np.array(out, dtype=np.int64)


def loss_and_grads(weights: ModelWeights, examples: SegmentedExample | Sequence[SegmentedExample]):
    """Mean softmax cross-entropy over ``examples`` and its gradient.

    Examples are grouped by segment-length profile and each group runs as one
    batch through the segment stacks, the concatenation and the joint stack.
    """
    if isinstance(examples, SegmentedExample):
        examples = [examples]
    examples = list(examples)
    targets = _targets(weights, examples)
    grads = zero_grads(weights)
    total = 0.0
    scale = 1.0 / len(examples)
    for idx in group_by_profile(examples).values():
        fw = forward_batch(weights, stack_segments([examples[i] for i in idx]))
        t = targets[idx]
        total += float(cross_entropy(fw.logits, t).sum())
        backward_batch(fw, t, weights, scale, grads)
    return total * scale, grads


def mean_loss(weights: ModelWeights, examples: Sequence[SegmentedExample]) -> float:
    logits = batch_logits(weights, list(examples))
    return float(cross_entropy(logits, _targets(weights, examples)).mean())


def accuracy(weights: ModelWeights, examples: Sequence[SegmentedExample]) -> float:
    logits = batch_logits(weights, list(examples))
    return float(np.mean(np.argmax(logits, axis=-1) == _targets(weights, examples)))


def _perturbed(weights: ModelWeights, name: str, index: tuple, delta: float) -> ModelWeights:
    def fn(n, a):
        if n != name:
            return a
        a = a.copy()
        a[index] += delta
        return a
    return weights.map(fn)


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    worst: tuple[str, tuple, float, float] | None = None  # (tensor, index, analytic, numeric)
    per_tensor: dict = field(default_factory=dict)
    n_kinks: int = 0  # coordinates redrawn because +-h flipped a ReLU


def _loss_and_relu_pattern(weights: ModelWeights, examples: list[SegmentedExample]):
    targets = _targets(weights, examples)
    total = 0.0
    signs = []
    for idx in group_by_profile(examples).values():
        fw = forward_batch(weights, stack_segments([examples[i] for i in idx]))
        total += float(cross_entropy(fw.logits, targets[idx]).sum())
        tapes = [t for seg in fw.seg_tapes for t in seg] + fw.joint_tapes
        signs.extend((t["pre"] > 0).ravel() for t in tapes)
    pattern = np.concatenate(signs) if signs else np.zeros(0, bool)
    return total / len(examples), pattern


def finite_diff_check(weights: ModelWeights, example, h: float = 1e-5, n_coords: int = 200,
                      seed: int = 0, max_redraws: int = 20) -> GradCheckResult:
    """Compare analytic gradients with central differences on a random
    subsample of coordinates, at least one from every tensor.

    Embedding rows are drawn from ids that occur in the example; other rows
    have an identically zero gradient. A coordinate whose +-h perturbation
    changes any ReLU's active set straddles a kink, where the central
    difference is not a derivative; it is redrawn from the same tensor.
    """
    if weights.dtype != np.float64:
        raise ConfigError("gradient checks need float64 weights")
    examples = [example] if isinstance(example, SegmentedExample) else list(example)
    _, grads = loss_and_grads(weights, examples)
    rng = np.random.default_rng(seed)
    tensors = dict(weights.tensors())
    used_ids = sorted({t for ex in examples for s in ex.segments for t in s})
    names = list(tensors)
    picks = list(names) + [names[i] for i in rng.integers(len(names), size=max(0, n_coords - len(names)))]
    worst_err, worst = 0.0, None
    per_tensor: dict[str, float] = {}
    kinks = 0

    def draw(name, a):
        if name == "embedding":
            return (int(rng.choice(used_ids)), int(rng.integers(a.shape[1])))
        return tuple(int(rng.integers(n)) for n in a.shape)

    for name in picks:
        a = tensors[name]
        for _ in range(max_redraws):
            index = draw(name, a)
            f_plus, pat_plus = _loss_and_relu_pattern(_perturbed(weights, name, index, h), examples)
            f_minus, pat_minus = _loss_and_relu_pattern(_perturbed(weights, name, index, -h), examples)
            if np.array_equal(pat_plus, pat_minus):
                break
            kinks += 1
        g_fd = (f_plus - f_minus) / (2 * h)
        g_an = float(grads[name][index])
        err = abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-8)
        per_tensor[name] = max(per_tensor.get(name, 0.0), err)
        if err >= worst_err:
            worst_err, worst = err, (name, index, g_an, g_fd)
    return GradCheckResult(worst_err, len(picks), worst, per_tensor, kinks)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights: ModelWeights, grads: Gradients, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new weights; ``state`` is updated in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t

    def update(name, a):
        g = grads[name]
        if g.shape != a.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {a.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        return (a - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(a.dtype)

    return weights.map(update), state


@dataclass
class TrainResult:
    weights: ModelWeights
    train_curve: list = field(default_factory=list)  # (step, loss)
    eval_curve: list = field(default_factory=list)  # (step, eval_accuracy)

    @property
    def eval_accuracy(self) -> float:
        return self.eval_curve[-1][1] if self.eval_curve else float("nan")

    @property
    def best_eval_accuracy(self) -> float:
        return max(acc for _, acc in self.eval_curve)


def train(spec: SyntheticTaskSpec, config: ModelConfig, steps: int = 3000, lr: float = 1e-3, seed: int = 0,
          batch_size: int = 32, eval_every: int = 250, precision="f32", data: SyntheticDataset | None = None,
          callback=None) -> TrainResult:
    """Adam over shuffled minibatches; bit-reproducible for fixed arguments.

    ``callback(step, loss, eval_accuracy_or_None)`` is invoked after every step.
    """
    data = data or gen_synthetic(spec)
    if config.vocab_size < spec.vocab:
        raise ConfigError(f"model vocab_size {config.vocab_size} < task vocab {spec.vocab}")
    weights = init_weights(config, seed=seed, labels=spec.labels, precision=precision)
    rng = np.random.default_rng(seed + 1)
    state = AdamState()
    result = TrainResult(weights)
    order = np.empty(0, dtype=np.int64)
    pos = 0
    for step in range(1, steps + 1):
        if pos + batch_size > len(order):
            order = rng.permutation(len(data.train))
            pos = 0
        batch = [data.train[i] for i in order[pos:pos + batch_size]]
        pos += batch_size
        loss, grads = loss_and_grads(weights, batch)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step} (lr={lr}, P={config.n_parallel})")
        weights, state = adam_step(weights, grads, state, lr)
        result.train_curve.append((step, loss))
        acc = None
        if step % eval_every == 0 or step == steps:
            acc = accuracy(weights, data.eval)
            result.eval_curve.append((step, acc))
            log.info("step %d loss %.4f eval_acc %.4f", step, loss, acc)
        if callback is not None:
            callback(step, loss, acc)
    result.weights = weights
    return result

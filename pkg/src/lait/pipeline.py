"""Segmenting inputs and running the layer-adjustable interaction encoder.

The first ``P`` layers see each segment alone (local positions restarting at
0); layers ``P..L`` see the concatenation with global positions and a full
mask. :func:`lait_encode` does this literally, segment by segment;
:func:`lait_encode_masked` runs one pass over the concatenation with a
block-diagonal mask on the early layers. The two agree up to float rounding.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .config import EOS_ID, N_RESERVED_IDS, ModelConfig
from .encoder import AttentionCounter, embed, run_layers
from .errors import ConfigError, MaskError, ShapeError
from .hashing import fnv1a64
from .model import ClassifierHead, ModelWeights

__all__ = [
    "AttentionMask", "ClassifierHead", "SegmentedExample", "TaskTemplate", "TEMPLATES",
    "apply_template", "build_block_mask", "classify", "example_from_record", "full_mask",
    "lait_encode", "lait_encode_masked", "make_example", "segment_lengths", "split_passage",
    "tokenize", "vanilla_encode",
]


@dataclass(frozen=True)
class TaskTemplate:
    """Ordered ``(field, prefix)`` slots. A prefix may reference other fields
    with ``str.format`` syntax (WiC prefixes each sentence with its word)."""

    task_id: str
    slots: tuple[tuple[str, str], ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        names = [f for f, _ in self.slots]
        if len(set(names)) != len(names):
            raise ConfigError(f"template {self.task_id}: duplicate field in {names}")

    def required_fields(self) -> set[str]:
        need = {f for f, _ in self.slots}
        for _, prefix in self.slots:
            need |= {name for _, name, _, _ in string.Formatter().parse(prefix) if name}
        return need


_BINARY = ("false", "true")

TEMPLATES: dict[str, TaskTemplate] = {t.task_id: t for t in [
    TaskTemplate("mnli", (("hypothesis", "hypothesis: "), ("premise", "premise: ")),
                 ("entailment", "neutral", "contradiction")),
    TaskTemplate("rte", (("hypothesis", "hypothesis: "), ("premise", "premise: ")),
                 ("entailment", "not_entailment")),
    TaskTemplate("qqp", (("question1", "question1: "), ("question2", "question2: ")),
                 ("not_duplicate", "duplicate")),
    TaskTemplate("stsb", (("sentence1", "sentence1: "), ("sentence2", "sentence2: "))),
    TaskTemplate("wic", (("sentence1", "{word}: "), ("sentence2", "{word}: ")), _BINARY),
    TaskTemplate("boolq", (("question", "question: "), ("passage", "passage: ")), _BINARY),
    TaskTemplate("boolq_split", (("question", "question: "),)
                 + tuple((f"passage{i}", f"passage{i}: ") for i in range(1, 6)), _BINARY),
    TaskTemplate("fever", (("claim", "hypothesis: "), ("evidence", "premise: ")),
                 ("SUPPORTS", "REFUTES", "NOT ENOUGH INFO")),
    TaskTemplate("vitaminc", (("claim", "hypothesis: "), ("evidence", "premise: ")),
                 ("SUPPORTS", "REFUTES", "NOT ENOUGH INFO")),
    TaskTemplate("ae", (("question", "question: "), ("answer1", "answer1: "), ("answer2", "answer2: ")),
                 _BINARY),
    TaskTemplate("multirc", (("question", "question: "), ("answer", "answer: "), ("paragraph", "paragraph: ")),
                 _BINARY),
]}


def split_passage(passage: str, k: int = 5) -> list[str]:
    """Split into sentences, then repeatedly merge the adjacent pair with the
    smallest combined length until at most ``k`` pieces remain."""
    pieces = [s for s in re.split(r"(?<=[.!?])\s+", passage.strip()) if s]
    while len(pieces) > k:
        j = min(range(len(pieces) - 1), key=lambda i: len(pieces[i]) + len(pieces[i + 1]))
        pieces[j:j + 2] = [pieces[j] + " " + pieces[j + 1]]
    return pieces


def apply_template(template: TaskTemplate, fields: Mapping[str, str]) -> list[str]:
    if template.task_id == "boolq_split" and "passage" in fields and "passage1" not in fields:
        parts = split_passage(fields["passage"], 5)
        fields = {**fields, **{f"passage{i + 1}": p for i, p in enumerate(parts)}}
    missing = sorted(template.required_fields() - set(fields))
    if missing:
        raise KeyError(f"template {template.task_id!r} is missing field(s): {', '.join(missing)}")
    return [prefix.format(**fields) + fields[name] for name, prefix in template.slots]


def tokenize(text: str, config: ModelConfig) -> list[int]:
    """Whitespace tokens, case-folded, hashed into ``[2, vocab_size)``; EOS appended."""
    words = text.lower().split()
    if not words:
        raise ValueError("cannot tokenize empty text")
    span = config.vocab_size - N_RESERVED_IDS
    return [N_RESERVED_IDS + fnv1a64(w.encode("utf-8")) % span for w in words] + [EOS_ID]


@dataclass(frozen=True)
class SegmentedExample:
    segments: tuple[tuple[int, ...], ...]
    segment_texts: tuple[str, ...] = ()
    task_id: str = "raw"
    label: str | None = None

    def __post_init__(self):
        if not self.segments:
            raise ValueError("an example needs at least one segment")
        if any(len(s) == 0 for s in self.segments):
            raise ValueError("segments must be nonempty")

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def total_length(self) -> int:
        return sum(len(s) for s in self.segments)

    def concatenated(self) -> np.ndarray:
        return np.fromiter((t for s in self.segments for t in s), dtype=np.int64, count=self.total_length)


def make_example(segments: Sequence[Sequence[int]], label: str | None = None, task_id: str = "raw",
                 texts: Sequence[str] = ()) -> SegmentedExample:
    return SegmentedExample(tuple(tuple(int(t) for t in s) for s in segments), tuple(texts), task_id, label)


def example_from_record(record: Mapping, config: ModelConfig) -> SegmentedExample:
    """Build an example from a JSONL record ``{"task", "fields", "label"}``.

    For ``task == "raw"`` the fields are the segments themselves, either a list
    of strings or a mapping whose values are taken in order.
    """
    task = record.get("task", "raw")
    fields = record.get("fields")
    if fields is None:
        raise KeyError("record has no 'fields'")
    if task == "raw":
        texts = list(fields.values()) if isinstance(fields, Mapping) else list(fields)
    else:
        if task not in TEMPLATES:
            raise KeyError(f"unknown task {task!r}")
        texts = apply_template(TEMPLATES[task], fields)
    label = record.get("label")
    return make_example([tokenize(t, config) for t in texts], None if label is None else str(label), task, texts)


def segment_lengths(ex: SegmentedExample) -> list[int]:
    return [len(s) for s in ex.segments]


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray = field(repr=False)
    kind: str  # "block_diagonal" or "full"
    lengths: tuple[int, ...] = ()

    @property
    def side(self) -> int:
        return self.allowed.shape[0]

    def pair_count(self) -> int:
        # number of allowed (query, key) pairs
        return int(np.count_nonzero(self.allowed))


def build_block_mask(lengths: Sequence[int]) -> AttentionMask:
    if not lengths or any(n < 1 for n in lengths):
        raise MaskError(f"segment lengths must all be >= 1, got {list(lengths)}")
    seg = np.repeat(np.arange(len(lengths)), lengths)
    allowed = seg[:, None] == seg[None, :]
    allowed.setflags(write=False)
    return AttentionMask(allowed, "block_diagonal", tuple(int(n) for n in lengths))


def full_mask(side: int) -> AttentionMask:
    allowed = np.ones((side, side), dtype=bool)
    allowed.setflags(write=False)
    return AttentionMask(allowed, "full", (side,))


def _local_positions(lengths: Sequence[int]) -> np.ndarray:
    return np.concatenate([np.arange(n) for n in lengths])


def _check_model(weights: ModelWeights, config: ModelConfig | None) -> ModelConfig:
    if config is None:
        return weights.config
    if config.with_parallel(0) != weights.config.with_parallel(0):
        raise ConfigError("config does not match the weights it is used with")
    return config


def encode_segment(tokens: Sequence[int], weights: ModelWeights, p_layers: int,
                   counter: AttentionCounter | None = None) -> np.ndarray:
    """Layer-``p_layers`` representation of one segment encoded on its own."""
    pos = np.arange(len(tokens))
    return run_layers(embed(tokens, weights, pos), None, pos, weights, 0, p_layers, counter)


def lait_encode(
    ex: SegmentedExample,
    weights: ModelWeights,
    config: ModelConfig | None = None,
    cache=None,
    counter: AttentionCounter | None = None,
) -> np.ndarray:
    """Encode ``ex`` into an ``(m, d_model)`` matrix.

    Each segment runs alone through layers ``[0, P)``; results are joined and
    run through ``[P, L)``. With a ``cache``, layer-P segment matrices are
    looked up first and stored after computing. ``P = 0`` representations
    depend on context and bypass the cache.
    """
    cfg = _check_model(weights, config)
    P, L = cfg.n_parallel, cfg.n_layers
    reps = []
    for seg in ex.segments:
        rep = None
        key = None
        if cache is not None and P > 0:
            key = cache.key_for(weights.fingerprint, P, seg)
            rep = cache.get(key, tokens=seg)
            if rep is not None and (rep.shape != (len(seg), cfg.d_model) or rep.dtype != weights.dtype):
                rep = None
        if rep is None:
            rep = encode_segment(seg, weights, P, counter)
            if key is not None:
                cache.put_rep(key, rep, tokens=seg)
        reps.append(rep)
    x = np.concatenate(reps, axis=0) if len(reps) > 1 else reps[0]
    return run_layers(x, None, np.arange(ex.total_length), weights, P, L, counter)


def lait_encode_masked(
    ex: SegmentedExample,
    weights: ModelWeights,
    config: ModelConfig | None = None,
    counter: AttentionCounter | None = None,
) -> np.ndarray:
    """Single pass over the concatenation with a per-layer mask schedule:
    block-diagonal and local positions below ``P``, full and global from ``P``."""
    cfg = _check_model(weights, config)
    P, L = cfg.n_parallel, cfg.n_layers
    lengths = segment_lengths(ex)
    local = _local_positions(lengths)
    x = embed(ex.concatenated(), weights, local)
    x = run_layers(x, build_block_mask(lengths).allowed, local, weights, 0, P, counter)
    return run_layers(x, full_mask(ex.total_length).allowed, np.arange(ex.total_length), weights, P, L, counter)


def vanilla_encode(ex: SegmentedExample, weights: ModelWeights, counter: AttentionCounter | None = None) -> np.ndarray:
    """Plain fully self-attentive encoding of the concatenation over all layers.

    Sinusoidal embeddings still restart per segment, matching how every other
    path embeds; only the attention positions are global.
    """
    pos = np.arange(ex.total_length)
    x = embed(ex.concatenated(), weights, _local_positions(segment_lengths(ex)))
    return run_layers(x, None, pos, weights, 0, weights.config.n_layers, counter)


def classify(reps: np.ndarray, head: ClassifierHead) -> tuple[str, np.ndarray]:
    """Mean-pool token rows, apply the head; ties go to the lowest label index."""
    if reps.shape[-1] != head.w.shape[0]:
        raise ShapeError(f"representation width {reps.shape[-1]} != head input {head.w.shape[0]}")
    logits = reps.mean(axis=0) @ head.w + head.b
    return head.labels[int(np.argmax(logits))], logits

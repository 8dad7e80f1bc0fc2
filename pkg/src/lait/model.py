"""Weight containers, initialization and the ``LAITW`` weight-file format.

File layout (all integers little-endian)::

    b"LAITW"                      magic, 5 bytes
    u32 version                   currently 1
    u32 x 10                      ModelConfig fields (pos_scheme as its index)
    u32 n_labels, then per label: u32 byte length + UTF-8 bytes
    f32 matrices, row-major, in declaration order:
        embedding
        per layer: wq wk wv wo w1 w2 ln1 ln2 [rel_bias]
        head W, head b            (only when n_labels > 0)

The fingerprint is FNV-1a-64 over every byte after the magic.
"""

from __future__ import annotations

import dataclasses
import functools
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import POS_SCHEMES, ModelConfig
from .errors import ConfigError, FormatError, ShapeError
from .hashing import fnv1a64
from .tensor import as_dtype, frozen, glorot_uniform

WEIGHTS_MAGIC = b"LAITW"
WEIGHTS_VERSION = 1

_CONFIG_FIELDS = (
    "n_layers", "n_parallel", "d_model", "n_heads", "d_head",
    "d_ff", "vocab_size", "pos_scheme", "rel_buckets", "rel_max_distance",
)


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    ln1: np.ndarray
    ln2: np.ndarray
    rel_bias: np.ndarray | None = None  # (rel_buckets, n_heads)

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in dataclasses.fields(self):
            a = getattr(self, f.name)
            if a is not None:
                yield f.name, a


@dataclass(frozen=True)
class ClassifierHead:
    """Mean-pool over tokens followed by an affine map to one logit per label."""

    w: np.ndarray  # (d_model, n_labels)
    b: np.ndarray  # (n_labels,)
    labels: tuple[str, ...]

    def __post_init__(self):
        if self.w.shape[1] != len(self.labels) or self.b.shape != (len(self.labels),):
            raise ShapeError(
                f"head shapes w{self.w.shape} b{self.b.shape} do not fit {len(self.labels)} labels"
            )

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown label {label!r}; head knows {list(self.labels)}") from None


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    layers: tuple[LayerWeights, ...]
    head: ClassifierHead | None = None

    def __post_init__(self):
        _check_shapes(self)

    @property
    def dtype(self) -> np.dtype:
        return self.embedding.dtype

    @functools.cached_property
    def fingerprint(self) -> int:
        # arrays are read-only, so any change means a new ModelWeights and a fresh digest
        return fnv1a64(_body(self, self.dtype))

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every parameter in serialization order, with a dotted name."""
        yield "embedding", self.embedding
        for i, lw in enumerate(self.layers):
            for name, a in lw.tensors():
                yield f"layers.{i}.{name}", a
        if self.head is not None:
            yield "head.w", self.head.w
            yield "head.b", self.head.b

    def astype(self, precision) -> "ModelWeights":
        dt = as_dtype(precision)
        if dt == self.dtype:
            return self
        return self.map(lambda name, a: a.astype(dt))

    def map(self, fn) -> "ModelWeights":
        """Build new weights by applying ``fn(name, array)`` to every tensor."""
        layers = []
        for i, lw in enumerate(self.layers):
            layers.append(LayerWeights(**{
                n: frozen(fn(f"layers.{i}.{n}", a)) for n, a in lw.tensors()
            }))
        head = None
        if self.head is not None:
            head = ClassifierHead(
                frozen(fn("head.w", self.head.w)), frozen(fn("head.b", self.head.b)), self.head.labels
            )
        return ModelWeights(self.config, frozen(fn("embedding", self.embedding)), tuple(layers), head)

    def with_config(self, config: ModelConfig) -> "ModelWeights":
        """Same tensors under a config differing only in ``n_parallel``."""
        if dataclasses.replace(config, n_parallel=self.config.n_parallel) != self.config:
            raise ConfigError("with_config may only change n_parallel")
        return dataclasses.replace(self, config=config)

    def to_bytes(self) -> bytes:
        return WEIGHTS_MAGIC + _body(self, np.float32)

    def save(self, path: str | Path) -> None:
        from .io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())


def _check_shapes(w: ModelWeights) -> None:
    c = w.config
    d = c.d_model
    if w.embedding.shape != (c.vocab_size, d):
        raise ShapeError(f"embedding {w.embedding.shape} != {(c.vocab_size, d)}")
    if len(w.layers) != c.n_layers:
        raise ShapeError(f"expected {c.n_layers} layers, got {len(w.layers)}")
    want = {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "w1": (d, c.d_ff), "w2": (c.d_ff, d), "ln1": (d,), "ln2": (d,),
    }
    for i, lw in enumerate(w.layers):
        for name, shape in want.items():
            if getattr(lw, name).shape != shape:
                raise ShapeError(f"layer {i} {name} {getattr(lw, name).shape} != {shape}")
        if c.pos_scheme == "relative-bucket":
            if lw.rel_bias is None or lw.rel_bias.shape != (c.rel_buckets, c.n_heads):
                raise ShapeError(f"layer {i} needs a ({c.rel_buckets}, {c.n_heads}) relative-bias table")
        elif lw.rel_bias is not None:
            raise ShapeError(f"layer {i} has a relative-bias table but pos_scheme={c.pos_scheme}")
    if w.head is not None and w.head.w.shape[0] != d:
        raise ShapeError(f"head input width {w.head.w.shape[0]} != d_model {d}")
    dtypes = {a.dtype for _, a in w.tensors()}
    if len(dtypes) != 1 or dtypes.pop() not in (np.float32, np.float64):
        raise ShapeError("all tensors must share one float32/float64 dtype")


def init_weights(
    config: ModelConfig,
    seed: int = 0,
    labels: Sequence[str] | None = ("0", "1"),
    precision="f32",
) -> ModelWeights:
    """Seeded init: Glorot-uniform projections, ones for gains, zero bias tables and head."""
    dt = as_dtype(precision)
    rng = np.random.default_rng(seed)
    d = config.d_model
    embedding = rng.standard_normal((config.vocab_size, d)).astype(dt)
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            wq=glorot_uniform(rng, d, d, dt),
            wk=glorot_uniform(rng, d, d, dt),
            wv=glorot_uniform(rng, d, d, dt),
            wo=glorot_uniform(rng, d, d, dt),
            w1=glorot_uniform(rng, d, config.d_ff, dt),
            w2=glorot_uniform(rng, config.d_ff, d, dt),
            ln1=np.ones(d, dt),
            ln2=np.ones(d, dt),
            rel_bias=(np.zeros((config.rel_buckets, config.n_heads), dt)
                      if config.pos_scheme == "relative-bucket" else None),
        ))
    head = None
    if labels:
        # zero head: uniform logits at init, so the starting loss is ln(n_labels)
        head = ClassifierHead(np.zeros((d, len(labels)), dt), np.zeros(len(labels), dt), tuple(labels))
    return ModelWeights(config, embedding, tuple(layers), head).map(lambda _, a: a)


def _body(w: ModelWeights, dtype) -> bytes:
    c = w.config
    parts = [struct.pack("<I", WEIGHTS_VERSION)]
    values = [getattr(c, f) for f in _CONFIG_FIELDS]
    values[_CONFIG_FIELDS.index("pos_scheme")] = POS_SCHEMES.index(c.pos_scheme)
    parts.append(struct.pack("<10I", *values))
    labels = w.head.labels if w.head is not None else ()
    parts.append(struct.pack("<I", len(labels)))
    for lab in labels:
        raw = lab.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    le = np.dtype(dtype).newbyteorder("<")
    for _, a in w.tensors():
        parts.append(np.ascontiguousarray(a, dtype=le).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated", f"need {n} bytes for {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self.take(4 * n, what)
        return frozen(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape))


def weights_from_bytes(data: bytes) -> ModelWeights:
    if data[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise FormatError("bad_magic", f"expected {WEIGHTS_MAGIC!r}, got {bytes(data[:5])!r}", 0)
    r = _Reader(data, len(WEIGHTS_MAGIC))
    version = r.u32("version")
    if version != WEIGHTS_VERSION:
        raise FormatError("bad_version", f"unsupported weights version {version}", r.pos - 4)
    raw = dict(zip(_CONFIG_FIELDS, struct.unpack("<10I", r.take(40, "config"))))
    if raw["pos_scheme"] >= len(POS_SCHEMES):
        raise FormatError("bad_config", f"pos_scheme index {raw['pos_scheme']}", r.pos)
    raw["pos_scheme"] = POS_SCHEMES[raw["pos_scheme"]]
    try:
        config = ModelConfig(**raw)
    except ConfigError as e:
        raise FormatError("bad_config", str(e), r.pos) from None
    n_labels = r.u32("label count")
    if n_labels > 1 << 16:
        raise FormatError("bad_header", f"implausible label count {n_labels}", r.pos - 4)
    labels = []
    for _ in range(n_labels):
        n = r.u32("label length")
        try:
            labels.append(r.take(n, "label").decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError("bad_header", "label is not UTF-8", r.pos) from None
    d = config.d_model
    embedding = r.f32((config.vocab_size, d), "embedding")
    layers = []
    for i in range(config.n_layers):
        t = {}
        for name, shape in (("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)), ("wo", (d, d)),
                            ("w1", (d, config.d_ff)), ("w2", (config.d_ff, d)),
                            ("ln1", (d,)), ("ln2", (d,))):
            t[name] = r.f32(shape, f"layers.{i}.{name}")
        if config.pos_scheme == "relative-bucket":
            t["rel_bias"] = r.f32((config.rel_buckets, config.n_heads), f"layers.{i}.rel_bias")
        layers.append(LayerWeights(**t))
    head = None
    if n_labels:
        head = ClassifierHead(r.f32((d, n_labels), "head.w"), r.f32((n_labels,), "head.b"), tuple(labels))
    if r.pos != len(data):
        raise FormatError("trailing_bytes", f"{len(data) - r.pos} unexpected bytes", r.pos)
    return ModelWeights(config, embedding, tuple(layers), head)


def load_weights(path: str | Path) -> ModelWeights:
    return weights_from_bytes(Path(path).read_bytes())

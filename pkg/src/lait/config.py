from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError
from .hashing import fnv1a64

POS_SCHEMES = ("none", "sinusoidal-local", "relative-bucket")

# 0 = PAD (unused in the reference path), 1 = EOS
PAD_ID = 0
EOS_ID = 1
N_RESERVED_IDS = 2


@dataclass(frozen=True)
class ModelConfig:
    """Encoder hyperparameters. ``n_parallel`` is the number of leading layers
    that encode each segment on its own; the rest attend across segments."""

    n_layers: int = 4
    n_parallel: int = 0
    d_model: int = 32
    n_heads: int = 2
    d_head: int = 16
    d_ff: int = 64
    vocab_size: int = 512
    pos_scheme: str = "relative-bucket"
    rel_buckets: int = 32
    rel_max_distance: int = 128

    def __post_init__(self):
        self.validate()

    @property
    def L(self) -> int:
        return self.n_layers

    @property
    def P(self) -> int:
        return self.n_parallel

    def validate(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "d_head", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(
                f"n_heads * d_head must equal d_model ({self.n_heads}*{self.d_head} != {self.d_model})"
            )
        if not 0 <= self.n_parallel <= self.n_layers:
            raise ConfigError(f"need 0 <= P <= L, got P={self.n_parallel}, L={self.n_layers}")
        if self.vocab_size <= N_RESERVED_IDS:
            raise ConfigError(f"vocab_size must exceed the {N_RESERVED_IDS} reserved ids")
        if self.pos_scheme not in POS_SCHEMES:
            raise ConfigError(f"unknown pos_scheme {self.pos_scheme!r}; expected one of {POS_SCHEMES}")
        if self.pos_scheme == "relative-bucket":
            if self.rel_buckets < 4 or self.rel_buckets % 2:
                raise ConfigError("rel_buckets must be an even number >= 4")
            if self.rel_max_distance <= self.rel_buckets // 4:
                raise ConfigError("rel_max_distance must exceed rel_buckets / 4")

    def with_parallel(self, p: int) -> "ModelConfig":
        return dataclasses.replace(self, n_parallel=p)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return f"{fnv1a64(blob):016x}"


# T5-base attention geometry; used for FLOP conversion
T5_BASE = ModelConfig(n_layers=12, n_parallel=0, d_model=768, n_heads=12, d_head=64, d_ff=3072, vocab_size=32128)

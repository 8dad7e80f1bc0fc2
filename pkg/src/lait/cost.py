"""Analytic attention-operation counts and dataset-level cost ratios.

An "operation" is one allowed (query, key) pair in one layer. With ``P``
parallel layers over segments of lengths ``s_1..s_n``::

    ops_parallel = P * sum(s_i ** 2)
    ops_joint    = (L - P) * sum(s_i) ** 2
    baseline     = L * sum(s_i) ** 2          (the P = 0 encoder)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .config import T5_BASE, ModelConfig
from .errors import ConfigError


@dataclass(frozen=True)
class CostReport:
    ops_parallel: int
    ops_joint: int
    baseline_ops: int
    flops: int = 0

    @property
    def ops_total(self) -> int:
        return self.ops_parallel + self.ops_joint

    @property
    def ratio(self) -> float:
        return self.ops_total / self.baseline_ops


@dataclass(frozen=True)
class LengthRecord:
    lengths: tuple[int, ...]
    multiplicity: int = 1
    segment_digests: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.lengths or any(n < 1 for n in self.lengths):
            raise ValueError(f"lengths must be nonempty and >= 1, got {self.lengths}")
        if self.multiplicity < 1:
            raise ValueError("multiplicity must be >= 1")
        if self.segment_digests is not None and len(self.segment_digests) != len(self.lengths):
            raise ValueError("need one digest per segment")

    @classmethod
    def from_json(cls, obj: Mapping) -> "LengthRecord":
        digests = obj.get("digests")
        return cls(
            tuple(int(n) for n in obj["lengths"]),
            int(obj.get("mult", 1)),
            None if digests is None else tuple(str(d) for d in digests),
        )


def _check_layers(L: int, P: int) -> None:
    if L < 1 or not 0 <= P <= L:
        raise ConfigError(f"need 0 <= P <= L, got P={P}, L={L}")


def attention_ops(lengths: Sequence[int], L: int, P: int, config: ModelConfig | None = None) -> CostReport:
    _check_layers(L, P)
    if not lengths or any(n < 1 for n in lengths):
        raise ValueError(f"invalid segment lengths {list(lengths)}")
    m = sum(lengths)
    par = P * sum(n * n for n in lengths)
    joint = (L - P) * m * m
    return CostReport(par, joint, L * m * m, ops_to_flops(par + joint, config or T5_BASE))


def ops_to_flops(ops: int, config: ModelConfig = T5_BASE) -> int:
    """Pairwise attention arithmetic only: per head and pair, ``2 * d_head`` for
    the score dot product and ``2 * d_head`` for accumulating the value."""
    if ops < 0:
        raise ValueError("ops must be >= 0")
    return ops * 4 * config.n_heads * config.d_head


def dataset_totals(records: Iterable[LengthRecord], L: int, P: int) -> tuple[int, int]:
    """``(lait_ops, baseline_ops)`` summed per example, weighted by multiplicity."""
    _check_layers(L, P)
    total = base = 0
    n = 0
    for r in records:
        rep = attention_ops(r.lengths, L, P)
        total += rep.ops_total * r.multiplicity
        base += rep.baseline_ops * r.multiplicity
        n += 1
    if n == 0:
        raise ValueError("no records")
    return total, base


def dataset_cost(records: Iterable[LengthRecord], L: int, P: int) -> float:
    total, base = dataset_totals(records, L, P)
    return total / base


def cached_dataset_totals(records: Iterable[LengthRecord], L: int, P: int) -> tuple[int, int]:
    """Like :func:`dataset_totals`, but parallel-layer work is paid once per
    distinct segment digest; joint work is paid per occurrence."""
    _check_layers(L, P)
    seen: dict[str, int] = {}
    par = joint = base = 0
    n = 0
    for r in records:
        if r.segment_digests is None:
            raise ValueError("cached cost needs segment digests on every record")
        m = sum(r.lengths)
        for d, length in zip(r.segment_digests, r.lengths):
            if d not in seen:
                seen[d] = length
                par += P * length * length
            elif seen[d] != length:
                raise ValueError(f"digest {d} seen with lengths {seen[d]} and {length}")
        joint += (L - P) * m * m * r.multiplicity
        base += L * m * m * r.multiplicity
        n += 1
    if n == 0:
        raise ValueError("no records")
    return par + joint, base


def cached_dataset_cost(records: Iterable[LengthRecord], L: int, P: int) -> float:
    total, base = cached_dataset_totals(records, L, P)
    return total / base


def sweep(records: Sequence[LengthRecord], L: int, config: ModelConfig = T5_BASE) -> list[dict]:
    """One row per P in ``0..L`` with the CSV columns of the ``cost`` command."""
    with_digests = all(r.segment_digests is not None for r in records)
    rows = []
    for P in range(L + 1):
        total, base = dataset_totals(records, L, P)
        row = {"P": P, "ops_total": total, "flops": ops_to_flops(total, config), "ratio_full": total / base}
        if with_digests:
            row["ratio_cached"] = cached_dataset_cost(records, L, P)
        else:
            row["ratio_cached"] = ""
        rows.append(row)
    return rows

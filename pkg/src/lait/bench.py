"""Workload benchmarks: Cartesian segment products and corpus replay.

Each run encodes the workload with and without a segment cache, counts
attention pairs actually computed, and compares them to the analytic model.
"""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .cache import RepCache
from .config import EOS_ID, N_RESERVED_IDS
from .cost import LengthRecord, cached_dataset_totals, dataset_totals
from .encoder import AttentionCounter
from .hashing import token_digest
from .model import ModelWeights
from .pipeline import SegmentedExample, lait_encode, make_example, segment_lengths


def parse_set_spec(text: str) -> tuple[int, int]:
    """``"17x16"`` -> (17 segments, 16 tokens each)."""
    try:
        count, length = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"expected COUNTxLENGTH, got {text!r}") from None
    if count < 1 or length < 1:
        raise ValueError(f"count and length must be >= 1 in {text!r}")
    return count, length


def random_segments(rng: np.random.Generator, count: int, length: int, vocab_size: int) -> list[list[int]]:
    """Distinct random segments of exactly ``length`` ids, the last being EOS."""
    if count > (vocab_size - N_RESERVED_IDS) ** (length - 1):
        raise ValueError(f"cannot draw {count} distinct segments of length {length} from vocab {vocab_size}")
    out, seen = [], set()
    while len(out) < count:
        body = rng.integers(N_RESERVED_IDS, vocab_size, size=length - 1).tolist()
        seg = tuple(body + [EOS_ID])
        if seg in seen:
            continue
        seen.add(seg)
        out.append(list(seg))
    return out


def cartesian_workload(left: Sequence[Sequence[int]], right: Sequence[Sequence[int]]) -> list[SegmentedExample]:
    return [make_example([a, b]) for a in left for b in right]


def length_records(examples: Sequence[SegmentedExample]) -> list[LengthRecord]:
    return [
        LengthRecord(tuple(segment_lengths(ex)), 1, tuple(f"{token_digest(s):016x}" for s in ex.segments))
        for ex in examples
    ]


@dataclass
class PassResult:
    seconds: float
    ops: int
    outputs: list | None
    cache_stats: dict | None


def encode_all(examples: Sequence[SegmentedExample], weights: ModelWeights, cache: RepCache | None,
               workers: int = 1, keep_outputs: bool = False) -> PassResult:
    def one(ex):
        counter = AttentionCounter()
        out = lait_encode(ex, weights, cache=cache, counter=counter)
        return out, counter.pairs

    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, examples))
    else:
        results = [one(ex) for ex in examples]
    seconds = time.perf_counter() - t0
    return PassResult(
        seconds,
        sum(r[1] for r in results),
        [r[0] for r in results] if keep_outputs else None,
        cache.stats() if cache is not None else None,
    )


def _timing(samples: list[float]) -> dict:
    return {
        "median_s": statistics.median(samples),
        "std_s": statistics.stdev(samples) if len(samples) > 1 else 0.0,
        "samples_s": samples,
    }


def run_workload(examples: Sequence[SegmentedExample], weights: ModelWeights, reps: int = 5,
                 use_cache: bool = True, budget_bytes: int | None = None, workers: int = 1,
                 make_cache: Callable[[], RepCache] | None = None) -> dict:
    """Encode ``examples`` ``reps`` times uncached and (optionally) cached.

    Every cached repetition starts from an empty cache, so its time includes
    filling it. Outputs of the first repetition of each mode are compared
    bit-for-bit.
    """
    cfg = weights.config
    L, P = cfg.n_layers, cfg.n_parallel
    records = length_records(examples)
    analytic_full, baseline = dataset_totals(records, L, P)
    analytic_cached, _ = cached_dataset_totals(records, L, P)
    make_cache = make_cache or (lambda: RepCache(budget_bytes=budget_bytes))

    plain_times, plain_ops, plain_out = [], None, None
    for r in range(reps):
        res = encode_all(examples, weights, None, workers, keep_outputs=(r == 0))
        plain_times.append(res.seconds)
        if r == 0:
            plain_ops, plain_out = res.ops, res.outputs

    report = {
        "n_examples": len(examples),
        "layers": L,
        "p": P,
        "analytic": {
            "baseline_ops": baseline,
            "uncached_ops": analytic_full,
            "cached_ops": analytic_cached,
            "cached_over_uncached": analytic_cached / analytic_full,
        },
        "uncached": {"measured_ops": plain_ops, "ops_match": plain_ops == analytic_full, **_timing(plain_times)},
    }
    if not use_cache:
        return report

    cached_times, cached_ops, stats, identical = [], None, None, None
    for r in range(reps):
        res = encode_all(examples, weights, make_cache(), workers, keep_outputs=(r == 0))
        cached_times.append(res.seconds)
        if r == 0:
            cached_ops, stats = res.ops, res.cache_stats
            identical = all(np.array_equal(a, b) for a, b in zip(plain_out, res.outputs))
    report["cached"] = {
        "measured_ops": cached_ops,
        "ops_match": cached_ops == analytic_cached,
        "outputs_identical": identical,
        "cache": stats,
        **_timing(cached_times),
    }
    report["measured_ops_ratio"] = cached_ops / plain_ops
    report["speedup"] = report["uncached"]["median_s"] / report["cached"]["median_s"]
    return report

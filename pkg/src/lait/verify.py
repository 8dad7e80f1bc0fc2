"""Structural invariant checks run by ``lait verify`` and the acceptance tests.

Every check draws its own random configs and examples from a seed and returns
a :class:`Check` with the measured quantity next to its threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cache import RepCache
from .config import EOS_ID, N_RESERVED_IDS, POS_SCHEMES, ModelConfig
from .cost import attention_ops
from .encoder import AttentionCounter
from .model import ModelWeights, init_weights
from .pipeline import (
    SegmentedExample,
    encode_segment,
    lait_encode,
    lait_encode_masked,
    make_example,
    segment_lengths,
    vanilla_encode,
)
from .train import finite_diff_check


@dataclass
class Check:
    name: str
    passed: bool
    value: float | int | None = None
    threshold: float | int | None = None
    detail: str = ""
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = [f"[{status}] {self.name}"]
        if self.value is not None:
            parts.append(f"value={self.value:.3g}" if isinstance(self.value, float) else f"value={self.value}")
        if self.threshold is not None:
            parts.append(f"threshold={self.threshold}")
        if self.detail:
            parts.append(self.detail)
        return "  ".join(parts)


def random_config(rng: np.random.Generator, L: int | None = None, P: int | None = None,
                  pos_scheme: str | None = None, vocab_size: int = 64) -> ModelConfig:
    L = int(rng.integers(2, 7)) if L is None else L
    P = int(rng.integers(0, L + 1)) if P is None else P
    n_heads = int(rng.choice([1, 2, 4]))
    d_head = int(rng.choice([2, 4]))
    return ModelConfig(
        n_layers=L, n_parallel=P, d_model=n_heads * d_head, n_heads=n_heads, d_head=d_head,
        d_ff=int(rng.choice([8, 16])), vocab_size=vocab_size,
        pos_scheme=pos_scheme or str(rng.choice(POS_SCHEMES)),
        rel_buckets=int(rng.choice([8, 16, 32])), rel_max_distance=int(rng.choice([16, 64])),
    )


def random_example(rng: np.random.Generator, vocab_size: int, n_segments: int | None = None,
                   max_len: int = 10, label: str | None = None) -> SegmentedExample:
    n = int(rng.integers(1, 5)) if n_segments is None else n_segments
    segs = []
    for _ in range(n):
        k = int(rng.integers(0, max_len))
        segs.append(rng.integers(N_RESERVED_IDS, vocab_size, size=k).tolist() + [EOS_ID])
    return make_example(segs, label)


def randomize(weights: ModelWeights, rng: np.random.Generator, scale: float = 0.5) -> ModelWeights:
    """Perturb gains, bias tables and the head away from their constant init
    so the checks exercise them."""
    head_scale = scale / np.sqrt(weights.config.d_model)  # keeps logits O(1), away from saturation

    def fn(name, a):
        if name.endswith(("ln1", "ln2", "rel_bias")) or name == "head.b":
            return a + (scale * rng.standard_normal(a.shape)).astype(a.dtype)
        if name == "head.w":
            return a + (head_scale * rng.standard_normal(a.shape)).astype(a.dtype)
        return a
    return weights.map(fn)


def check_dual_path(n_cases: int = 100, seed: int = 0) -> list[Check]:
    """Segment-by-segment encoding vs one masked pass, in both precisions."""
    rng = np.random.default_rng(seed)
    worst = {"f32": 0.0, "f64": 0.0}
    for _ in range(n_cases):
        cfg = random_config(rng)
        ex = random_example(rng, cfg.vocab_size)
        w = randomize(init_weights(cfg, seed=int(rng.integers(1 << 31)), precision="f64"), rng)
        for prec in ("f32", "f64"):
            wp = w.astype(prec)
            diff = float(np.max(np.abs(lait_encode(ex, wp) - lait_encode_masked(ex, wp))))
            worst[prec] = max(worst[prec], diff)
    return [
        Check("dual-path equivalence f32", worst["f32"] < 1e-5, worst["f32"], 1e-5, f"{n_cases} cases"),
        Check("dual-path equivalence f64", worst["f64"] < 1e-10, worst["f64"], 1e-10, f"{n_cases} cases"),
    ]


def check_endpoints(n_cases: int = 50, seed: int = 1) -> list[Check]:
    """P=0 equals the plain encoder; P=L equals independent encodings joined."""
    rng = np.random.default_rng(seed)
    bad0 = badL = 0
    for _ in range(n_cases):
        cfg = random_config(rng, P=0)
        ex = random_example(rng, cfg.vocab_size)
        w = randomize(init_weights(cfg, seed=int(rng.integers(1 << 31))), rng)
        if not np.array_equal(lait_encode(ex, w), vanilla_encode(ex, w)):
            bad0 += 1
        wL = w.with_config(cfg.with_parallel(cfg.n_layers))
        joined = np.concatenate([encode_segment(s, wL, cfg.n_layers) for s in ex.segments])
        if not np.array_equal(lait_encode(ex, wL), joined):
            badL += 1
    return [
        Check("LAIT-0 == full-attention encoder (bitwise)", bad0 == 0, bad0, 0, f"mismatches over {n_cases}"),
        Check("LAIT-L == independent segments joined (bitwise)", badL == 0, badL, 0, f"mismatches over {n_cases}"),
    ]


def check_ops_counter(n_cases: int = 1000, seed: int = 2) -> Check:
    """Instrumented pair counts of both encode paths vs the analytic formula."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for i in range(n_cases):
        L = int(rng.integers(1, 7))
        # force the edge cases into the mix: single segment, P=0, P=L
        P = [0, L][i % 2] if i % 4 < 2 else int(rng.integers(0, L + 1))
        n = 1 if i % 5 == 0 else None
        cfg = ModelConfig(n_layers=L, n_parallel=P, d_model=4, n_heads=2, d_head=2, d_ff=4,
                          vocab_size=32, pos_scheme="none")
        ex = random_example(rng, cfg.vocab_size, n_segments=n, max_len=12)
        w = init_weights(cfg, seed=i, labels=None)
        want = attention_ops(segment_lengths(ex), L, P).ops_total
        c1, c2 = AttentionCounter(), AttentionCounter()
        lait_encode(ex, w, counter=c1)
        lait_encode_masked(ex, w, counter=c2)
        mismatches += (c1.pairs != want) + (c2.pairs != want)
    return Check("attention-pair counter == analytic ops", mismatches == 0, mismatches, 0,
                 f"mismatches over {n_cases} cases x 2 paths")


def replay_workload(rng: np.random.Generator, n_examples: int, vocab_size: int, pool_size: int = 40,
                    max_len: int = 12) -> list[SegmentedExample]:
    """Examples drawn from a small pool of segments, so segments repeat."""
    pool = [rng.integers(N_RESERVED_IDS, vocab_size, size=int(rng.integers(0, max_len))).tolist() + [EOS_ID]
            for _ in range(pool_size)]
    out = []
    for _ in range(n_examples):
        n = int(rng.integers(1, 4))
        out.append(make_example([pool[j] for j in rng.integers(pool_size, size=n)]))
    return out


def check_cache_transparency(n_examples: int = 500, seed: int = 3, budget_bytes: int | None = 4096) -> list[Check]:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_layers=4, n_parallel=2, d_model=16, n_heads=2, d_head=8, d_ff=32, vocab_size=64)
    w = randomize(init_weights(cfg, seed=seed), rng)
    examples = replay_workload(rng, n_examples, cfg.vocab_size)
    cache = RepCache(budget_bytes=budget_bytes)
    mismatches = 0
    over_budget = False
    for ex in examples:
        if not np.array_equal(lait_encode(ex, w), lait_encode(ex, w, cache=cache)):
            mismatches += 1
        over_budget |= budget_bytes is not None and cache.resident_bytes > budget_bytes
    # re-encoding an example with an unbounded cache hits once per segment
    repeat = RepCache()
    ex = examples[0]
    lait_encode(ex, w, cache=repeat)
    before = repeat.hits
    lait_encode(ex, w, cache=repeat)
    st = cache.stats()
    return [
        Check("cache transparency (bitwise)", mismatches == 0, mismatches, 0,
              f"{n_examples}-example replay, hit rate {st['hit_rate']:.2f}"),
        Check("cache resident bytes within budget", not over_budget, st["resident_bytes"], budget_bytes),
        Check("second encode hits every segment", repeat.hits - before == ex.n_segments,
              repeat.hits - before, ex.n_segments),
    ]


def check_gradients(n_configs: int = 20, seed: int = 4, tol: float = 1e-4, n_coords: int = 200) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_detail = ""
    for i in range(n_configs):
        L = int(rng.integers(2, 5))
        P = (0, L // 2, L)[i % 3]
        cfg = random_config(rng, L=L, P=P)
        w = randomize(init_weights(cfg, seed=i, labels=("a", "b", "c"), precision="f64"), rng)
        ex = random_example(rng, cfg.vocab_size, label=str(rng.choice(["a", "b", "c"])))
        res = finite_diff_check(w, ex, h=1e-5, n_coords=n_coords, seed=i)
        if res.max_rel_error >= worst:
            worst = res.max_rel_error
            worst_detail = f"L={L} P={P} pos={cfg.pos_scheme} worst={res.worst[0]}"
    return Check("finite-difference gradients", worst < tol, worst, tol,
                 f"{n_configs} configs, P in {{0, L/2, L}}; {worst_detail}")


def check_masked_independence(n_cases: int = 30, seed: int = 5) -> Check:
    """Changing one segment leaves the others' layer-P rows bit-identical
    under the block-diagonal mask."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_cases):
        cfg = random_config(rng)
        cfg = cfg.with_parallel(cfg.n_layers)
        ex = random_example(rng, cfg.vocab_size, n_segments=int(rng.integers(2, 5)))
        w = randomize(init_weights(cfg, seed=int(rng.integers(1 << 31))), rng)
        j = int(rng.integers(ex.n_segments))
        segs = [list(s) for s in ex.segments]
        segs[j] = rng.integers(N_RESERVED_IDS, cfg.vocab_size, size=len(segs[j])).tolist()
        a = lait_encode_masked(ex, w)
        b = lait_encode_masked(make_example(segs), w)
        start = 0
        for i, s in enumerate(ex.segments):
            if i != j and not np.array_equal(a[start:start + len(s)], b[start:start + len(s)]):
                bad += 1
            start += len(s)
    return Check("masked segment independence (bitwise)", bad == 0, bad, 0, f"{n_cases} cases")


SUITE: dict[str, Callable[..., Check | list[Check]]] = {
    "dual_path": check_dual_path,
    "endpoints": check_endpoints,
    "ops_counter": check_ops_counter,
    "cache": check_cache_transparency,
    "gradients": check_gradients,
    "independence": check_masked_independence,
}


def run_suite(seed: int = 0, quick: bool = False) -> list[Check]:
    """Run every check; ``quick`` shrinks case counts for smoke runs."""
    sizes = {"dual_path": 100, "endpoints": 50, "ops_counter": 1000, "cache": 500, "gradients": 20,
             "independence": 30}
    if quick:
        sizes = {k: max(3, v // 20) for k, v in sizes.items()}
    out: list[Check] = []
    for i, (name, fn) in enumerate(SUITE.items()):
        arg = "n_examples" if name == "cache" else ("n_configs" if name == "gradients" else "n_cases")
        res = fn(**{arg: sizes[name], "seed": seed * 100 + i})
        out.extend(res if isinstance(res, list) else [res])
    return out

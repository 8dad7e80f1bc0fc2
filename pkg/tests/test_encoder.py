import math

import numpy as np
import pytest

from lait.config import ModelConfig
from lait.encoder import (
    AttentionCounter,
    encoder_layer,
    multi_head_attention,
    relative_position_bucket,
    run_layers,
)
from lait.errors import ConfigError, ShapeError
from lait.model import init_weights
from lait.tensor import rms_norm


def ref_bucket(offset, n_buckets=32, max_distance=128):
    """Scalar T5 bucketing written directly from the definition."""
    half = n_buckets // 2
    bucket = half if offset > 0 else 0
    n = abs(offset)
    max_exact = half // 2
    if n < max_exact:
        return bucket + n
    large = max_exact + int(math.log(n / max_exact) / math.log(max_distance / max_exact) * (half - max_exact))
    return bucket + min(large, half - 1)


def naive_attention(x, allowed, positions, lw, cfg):
    """Per-query, per-head loops in float64."""
    x = x.astype(np.float64)
    T = x.shape[0]
    out = np.zeros((T, cfg.d_model))
    q, k, v = x @ lw.wq, x @ lw.wk, x @ lw.wv
    ctx = np.zeros((T, cfg.d_model))
    for h in range(cfg.n_heads):
        sl = slice(h * cfg.d_head, (h + 1) * cfg.d_head)
        for i in range(T):
            keys = [j for j in range(T) if allowed is None or allowed[i, j]]
            scores = []
            for j in keys:
                s = float(q[i, sl] @ k[j, sl]) / math.sqrt(cfg.d_head)
                if cfg.pos_scheme == "relative-bucket":
                    b = ref_bucket(positions[j] - positions[i], cfg.rel_buckets, cfg.rel_max_distance)
                    s += float(lw.rel_bias[b, h])
                scores.append(s)
            mx = max(scores)
            e = [math.exp(s - mx) for s in scores]
            z = sum(e)
            for w, j in zip(e, keys):
                ctx[i, sl] += (w / z) * v[j, sl]
    out = ctx @ lw.wo
    return out


def _randomized(cfg, seed=0):
    rng = np.random.default_rng(seed + 100)
    w = init_weights(cfg, seed=seed, precision="f64")

    def fn(name, a):
        if name.endswith(("ln1", "ln2", "rel_bias")):
            return a + rng.standard_normal(a.shape)
        return a
    return w.map(fn)


class TestBuckets:
    def test_matches_reference(self):
        offsets = np.arange(-200, 201)
        got = relative_position_bucket(offsets, 32, 128)
        want = [ref_bucket(int(o), 32, 128) for o in offsets]
        assert got.tolist() == want

    @pytest.mark.parametrize("n_buckets,max_distance", [(8, 16), (16, 64), (32, 128), (64, 128)])
    def test_range_and_direction(self, n_buckets, max_distance):
        offsets = np.arange(-300, 301)
        b = relative_position_bucket(offsets, n_buckets, max_distance)
        half = n_buckets // 2
        assert b.min() >= 0 and b.max() < n_buckets
        assert np.all(b[offsets > 0] >= half)
        assert np.all(b[offsets <= 0] < half)
        # monotone in |offset| within each direction
        assert np.all(np.diff(b[offsets >= 1]) >= 0)
        assert np.all(np.diff(b[offsets <= 0][::-1]) >= 0)

    def test_exact_region(self):
        assert relative_position_bucket(np.arange(8), 32, 128).tolist() == [0, 17, 18, 19, 20, 21, 22, 23]
        assert relative_position_bucket(-np.arange(8), 32, 128).tolist() == list(range(8))

    def test_clipped_far(self):
        far = relative_position_bucket(np.array([128, 1000, -128, -1000]), 32, 128)
        assert far.tolist() == [31, 31, 15, 15]


@pytest.mark.parametrize("pos_scheme", ["none", "relative-bucket"])
@pytest.mark.parametrize("masked", [False, True])
def test_attention_matches_naive(pos_scheme, masked):
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_head=4, d_ff=8, vocab_size=16,
                      pos_scheme=pos_scheme, rel_buckets=8, rel_max_distance=16)
    w = _randomized(cfg, seed=3)
    rng = np.random.default_rng(0)
    T = 9
    x = rng.standard_normal((T, 8))
    positions = np.concatenate([np.arange(4), np.arange(5)])
    allowed = None
    if masked:
        seg = np.repeat([0, 1], [4, 5])
        allowed = seg[:, None] == seg[None, :]
    got = multi_head_attention(x, allowed, positions, w.layers[0], cfg)
    want = naive_attention(x, allowed, positions, w.layers[0], cfg)
    assert np.max(np.abs(got - want)) < 1e-10


def test_f32_close_to_naive():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_head=4, d_ff=8, vocab_size=16, rel_buckets=8,
                      rel_max_distance=16)
    w = _randomized(cfg)
    x = np.random.default_rng(1).standard_normal((6, 8))
    got = multi_head_attention(x.astype(np.float32), None, np.arange(6), w.astype("f32").layers[0], cfg)
    want = naive_attention(x, None, np.arange(6), w.layers[0], cfg)
    assert np.max(np.abs(got - want)) < 1e-5


def test_single_token_attends_to_itself():
    cfg = ModelConfig(n_layers=1, d_model=4, n_heads=1, d_head=4, d_ff=4, vocab_size=8, pos_scheme="none")
    w = init_weights(cfg, seed=0, precision="f64")
    lw = w.layers[0]
    x = np.random.default_rng(0).standard_normal((3, 4))
    out = multi_head_attention(x, np.eye(3, dtype=bool), np.arange(3), lw, cfg)
    np.testing.assert_allclose(out, x @ lw.wv @ lw.wo, atol=1e-12)


def test_counter_counts_allowed_pairs():
    cfg = ModelConfig(n_layers=1, d_model=4, n_heads=2, d_head=2, d_ff=4, vocab_size=8, pos_scheme="none")
    w = init_weights(cfg, seed=0)
    seg = np.repeat([0, 1], [2, 3])
    allowed = seg[:, None] == seg[None, :]
    c = AttentionCounter()
    multi_head_attention(np.ones((5, 4), np.float32), allowed, np.arange(5), w.layers[0], cfg, counter=c)
    assert (c.pairs, c.calls) == (13, 1)


def test_zero_weights_layer_is_identity():
    cfg = ModelConfig(n_layers=1, d_model=4, n_heads=2, d_head=2, d_ff=4, vocab_size=8)
    w = init_weights(cfg, seed=0, precision="f64").map(
        lambda n, a: np.zeros_like(a) if n.split(".")[-1] in ("wo", "w2") else a)
    x = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_array_equal(encoder_layer(x, None, np.arange(5), w.layers[0], cfg), x)


def test_layer_matches_composition():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_head=4, d_ff=16, vocab_size=16, rel_buckets=8,
                      rel_max_distance=16)
    w = _randomized(cfg, seed=5)
    lw = w.layers[0]
    x = np.random.default_rng(2).standard_normal((7, 8))
    pos = np.arange(7)
    y = x + naive_attention(rms_norm(x, lw.ln1), None, pos, lw, cfg)
    want = y + np.maximum(rms_norm(y, lw.ln2) @ lw.w1, 0) @ lw.w2
    np.testing.assert_allclose(encoder_layer(x, None, pos, lw, cfg), want, atol=1e-10)


def test_run_layers_composes_ranges():
    cfg = ModelConfig(n_layers=4, d_model=8, n_heads=2, d_head=4, d_ff=8, vocab_size=16)
    w = _randomized(cfg, seed=1)
    x = np.random.default_rng(0).standard_normal((5, 8))
    pos = np.arange(5)
    whole = run_layers(x, None, pos, w, 0, 4)
    split = run_layers(run_layers(x, None, pos, w, 0, 2), None, pos, w, 2, 4)
    np.testing.assert_array_equal(whole, split)
    np.testing.assert_array_equal(run_layers(x, None, pos, w, 2, 2), x)


def test_run_layers_rejects_bad_ranges():
    cfg = ModelConfig(n_layers=2, d_model=4, n_heads=1, d_head=4, d_ff=4, vocab_size=8)
    w = init_weights(cfg, seed=0)
    x = np.zeros((3, 4), np.float32)
    with pytest.raises(ConfigError):
        run_layers(x, None, np.arange(3), w, 1, 3)
    with pytest.raises(ShapeError):
        run_layers(np.zeros((3, 5), np.float32), None, np.arange(3), w, 0, 1)
    with pytest.raises(ShapeError):
        run_layers(x, np.ones((2, 2), bool), np.arange(3), w, 0, 1)


def test_permutation_equivariance_without_positions():
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_head=4, d_ff=8, vocab_size=16, pos_scheme="none")
    w = _randomized(cfg, seed=2)
    x = np.random.default_rng(3).standard_normal((6, 8))
    perm = np.random.default_rng(4).permutation(6)
    a = run_layers(x, None, np.arange(6), w, 0, 2)[perm]
    b = run_layers(x[perm], None, np.arange(6), w, 0, 2)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_batched_matches_single():
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_head=4, d_ff=8, vocab_size=16)
    w = _randomized(cfg, seed=7)
    xs = np.random.default_rng(5).standard_normal((3, 4, 8))
    batched = run_layers(xs, None, np.arange(4), w, 0, 2)
    for i in range(3):
        np.testing.assert_allclose(batched[i], run_layers(xs[i], None, np.arange(4), w, 0, 2), atol=1e-12)

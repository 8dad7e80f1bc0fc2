import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lait.config import T5_BASE, ModelConfig
from lait.errors import ConfigError, FormatError, ShapeError
from lait.hashing import fnv1a64, token_digest
from lait.model import WEIGHTS_MAGIC, init_weights, load_weights, weights_from_bytes


# frozen from an independent FNV-1a implementation
@pytest.mark.parametrize("data,want", [
    (b"", 0xCBF29CE484222325),
    (b"a", 0xAF63DC4C8601EC8C),
])
def test_fnv_known_values(data, want):
    assert fnv1a64(data) == want


def test_token_digest_known_values():
    assert token_digest([1, 2]) == 0xC9C28939C99668C6
    assert token_digest([2, 1]) == 0x46C2DA3BE7C31176


class TestConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert (cfg.L, cfg.P) == (4, 0)

    @pytest.mark.parametrize("kwargs", [
        {"n_parallel": 5},
        {"n_parallel": -1},
        {"d_model": 30},
        {"pos_scheme": "rotary"},
        {"rel_buckets": 7},
        {"vocab_size": 2},
        {"n_layers": 0, "n_parallel": 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = ModelConfig(n_layers=3, n_parallel=2, pos_scheme="none")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"layers": 3})

    def test_digest_depends_on_fields(self):
        assert ModelConfig().digest() != ModelConfig(n_parallel=1).digest()

    def test_t5_base_geometry(self):
        assert (T5_BASE.n_layers, T5_BASE.n_heads, T5_BASE.d_head) == (12, 12, 64)


CONFIGS = [
    ModelConfig(n_layers=2, n_parallel=1, d_model=8, n_heads=2, d_head=4, d_ff=16, vocab_size=20),
    ModelConfig(n_layers=3, d_model=6, n_heads=3, d_head=2, d_ff=5, vocab_size=10, pos_scheme="none"),
    ModelConfig(n_layers=1, d_model=4, n_heads=1, d_head=4, d_ff=4, vocab_size=5, pos_scheme="sinusoidal-local"),
]


class TestWeights:
    @pytest.mark.parametrize("cfg", CONFIGS)
    @pytest.mark.parametrize("labels", [None, ("a", "b", "c"), ("entailment", "ünïcode")])
    def test_round_trip_bit_exact(self, cfg, labels, tmp_path):
        w = init_weights(cfg, seed=1, labels=labels)
        path = tmp_path / "w.laitw"
        w.save(path)
        back = load_weights(path)
        assert back.config == cfg
        assert back.to_bytes() == w.to_bytes()
        assert back.fingerprint == w.fingerprint
        for (n1, a), (n2, b) in zip(w.tensors(), back.tensors()):
            assert n1 == n2 and a.tobytes() == b.tobytes()
        assert (back.head.labels if back.head else None) == labels

    def test_init_is_seeded(self):
        cfg = CONFIGS[0]
        assert init_weights(cfg, seed=3).fingerprint == init_weights(cfg, seed=3).fingerprint
        assert init_weights(cfg, seed=3).fingerprint != init_weights(cfg, seed=4).fingerprint

    def test_fingerprint_tracks_every_tensor(self):
        w = init_weights(CONFIGS[0], seed=0)
        seen = {w.fingerprint}
        for name, _ in w.tensors():
            def bump(n, a, name=name):
                if n != name:
                    return a
                a = a.copy()
                a.flat[0] += 1
                return a
            seen.add(w.map(bump).fingerprint)
        assert len(seen) == 1 + len(list(w.tensors()))

    def test_arrays_read_only(self):
        w = init_weights(CONFIGS[0])
        with pytest.raises(ValueError):
            w.layers[0].wq[0, 0] = 1.0

    def test_with_config_only_changes_p(self):
        w = init_weights(CONFIGS[0])
        assert w.with_config(CONFIGS[0].with_parallel(2)).config.P == 2
        with pytest.raises(ConfigError):
            w.with_config(ModelConfig(n_layers=2, d_model=8, n_heads=2, d_head=4, d_ff=8, vocab_size=20))

    def test_shape_checked(self):
        w = init_weights(CONFIGS[0])
        with pytest.raises(ShapeError):
            w.map(lambda n, a: a[:-1] if n == "embedding" else a)


class TestCorruptWeights:
    def _blob(self):
        return init_weights(CONFIGS[0], seed=0, labels=("x", "y")).to_bytes()

    def test_bad_magic(self):
        with pytest.raises(FormatError) as e:
            weights_from_bytes(b"NOPE!" + self._blob()[5:])
        assert e.value.reason == "bad_magic" and e.value.offset == 0

    def test_bad_version(self):
        blob = self._blob()
        with pytest.raises(FormatError) as e:
            weights_from_bytes(blob[:5] + struct.pack("<I", 9) + blob[9:])
        assert e.value.reason == "bad_version"

    def test_bad_config(self):
        blob = bytearray(self._blob())
        blob[9 + 4 * 2:9 + 4 * 3] = struct.pack("<I", 7)  # d_model no longer n_heads * d_head
        with pytest.raises(FormatError) as e:
            weights_from_bytes(bytes(blob))
        assert e.value.reason == "bad_config"

    @pytest.mark.parametrize("cut", [0, 3, 5, 20, 60, -1])
    def test_truncated(self, cut):
        blob = self._blob()
        with pytest.raises(FormatError) as e:
            weights_from_bytes(blob[:cut])
        assert e.value.reason in ("truncated", "bad_magic")

    def test_trailing(self):
        with pytest.raises(FormatError) as e:
            weights_from_bytes(self._blob() + b"\0")
        assert e.value.reason == "trailing_bytes"

    @settings(max_examples=200, deadline=None)
    @given(st.integers(5, 80), st.binary(min_size=1, max_size=8))
    def test_header_fuzz_never_escapes(self, pos, junk):
        blob = bytearray(self._blob())
        blob[pos:pos + len(junk)] = junk
        try:
            w = weights_from_bytes(bytes(blob))
        except FormatError:
            return
        assert isinstance(w.embedding, np.ndarray)

    def test_magic_constant(self):
        assert self._blob().startswith(WEIGHTS_MAGIC)

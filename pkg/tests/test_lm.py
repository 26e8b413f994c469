"""Frozen LM engine: hand-worked oracle, causality, cache equivalence, purity."""

import math

import numpy as np
import pytest

from facetclip import lm as L
from facetclip import tokenizer as tok
from facetclip.errors import CapacityError, ConfigError, FormatError
from facetclip.masks import CausalMask


@pytest.fixture(scope="module")
def tiny():
    return L.init_lm(L.PRESETS["tiny"], seed=42)


def _ref_layer_norm(x, gain, bias):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + 1e-5) * gain + bias


def _ref_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


class TestHandWorkedSingleToken:
    """Independent float64 recomputation of a 1-layer, 1-head, d=4 model.

    A single token makes every step checkable: rotary at position 0 is the
    identity rotation, and attention over one key is a weight of exactly 1,
    so the attention output equals the value vector.
    """

    def test_matches_reference(self):
        cfg = L.LMConfig(vocab_size=260, d_model=4, n_layers=1, n_heads=1, d_head=4, max_seq=8)
        rng = np.random.default_rng(7)
        weights = {name: (rng.standard_normal(shape) * 0.3).astype(np.float32)
                   for name, shape in L._expected_names(cfg).items()}
        model = L.FrozenLM(cfg, weights)
        token = 5
        got = L.forward_hidden(model, [token])

        w = {k: v.astype(np.float64) for k, v in weights.items()}
        x = w["tok_emb"][token]
        # attention sub-block: pre-norm, then q/k/v; the single position
        # attends only to itself, softmax of one score is 1, out = v
        h = _ref_layer_norm(x, w["layers.0.ln1.gain"], w["layers.0.ln1.bias"])
        v = h @ w["layers.0.attn.wv"]
        x = x + v @ w["layers.0.attn.wo"]
        # MLP sub-block
        h2 = _ref_layer_norm(x, w["layers.0.ln2.gain"], w["layers.0.ln2.bias"])
        x = x + _ref_gelu(h2 @ w["layers.0.mlp.w1"]) @ w["layers.0.mlp.w2"]
        want = _ref_layer_norm(x, w["ln_f.gain"], w["ln_f.bias"])

        assert got.shape == (1, 4)
        np.testing.assert_allclose(got[0], want, atol=1e-5)


class TestCausality:
    def test_appending_token_preserves_earlier_hidden(self, tiny):
        base = tok.tokenize("hello world")
        h1 = L.forward_hidden(tiny, base)
        h2 = L.forward_hidden(tiny, base + [33])
        assert h1.tobytes() == h2[: len(base)].tobytes()

    def test_perturbing_late_token_preserves_earlier_hidden(self, tiny):
        a = tok.tokenize("abcdefgh")
        b = list(a)
        b[-1] = 122
        ha = L.forward_hidden(tiny, a)
        hb = L.forward_hidden(tiny, b)
        np.testing.assert_array_equal(ha[:-1], hb[:-1])
        assert not np.array_equal(ha[-1], hb[-1])


class TestKVCache:
    def test_empty_prefix_matches_cache_free(self, tiny):
        cache = L.build_kv_cache(tiny, [])
        assert cache.span == 0
        seq = tok.tokenize("cached")
        np.testing.assert_array_equal(
            L.forward_hidden(tiny, seq, cache=cache), L.forward_hidden(tiny, seq)
        )

    def test_cached_kv_equals_slice_of_full_forward(self, tiny):
        full = tok.tokenize("the quick brown fox jumps over the lazy dog !!")
        prefix = full[:40]
        c_prefix = L.build_kv_cache(tiny, prefix)
        c_full = L.build_kv_cache(tiny, full)
        assert c_prefix.span == 40
        for kp, kf in zip(c_prefix.keys, c_full.keys):
            np.testing.assert_allclose(kp, kf[:, :40], atol=1e-6)
        for vp, vf in zip(c_prefix.values, c_full.values):
            np.testing.assert_allclose(vp, vf[:, :40], atol=1e-6)

    def test_forward_with_cache_matches_full_sequence(self, tiny):
        full = tok.tokenize("a caption that is split somewhere in the middle")
        prefix, suffix = full[:21], full[21:]
        cache = L.build_kv_cache(tiny, prefix)
        with_cache = L.forward_hidden(tiny, suffix, CausalMask(), cache)
        without = L.forward_hidden(tiny, full)[21:]
        np.testing.assert_allclose(with_cache, without, atol=1e-5)

    def test_same_prefix_gives_bit_identical_caches(self, tiny):
        p = tok.tokenize("determinism")
        c1 = L.build_kv_cache(tiny, p)
        c2 = L.build_kv_cache(tiny, p)
        for a, b in zip(c1.keys + c1.values, c2.keys + c2.values):
            assert a.tobytes() == b.tobytes()

    def test_capacity_error(self, tiny):
        with pytest.raises(CapacityError):
            L.forward_hidden(tiny, [0] * (tiny.config.max_seq + 1))


class TestFrozenPurity:
    def test_repeated_forward_bit_identical(self, tiny):
        seq = tok.tokenize("purity")
        assert L.forward_hidden(tiny, seq).tobytes() == L.forward_hidden(tiny, seq).tobytes()

    def test_weights_are_read_only(self, tiny):
        with pytest.raises(ValueError):
            tiny.weights["tok_emb"][0, 0] = 1.0


class TestWeightIO:
    def test_save_load_roundtrip_bit_exact(self, tiny, tmp_path):
        path = tmp_path / "m.flmw"
        L.save_weights(tiny, path)
        back = L.load_weights(path)
        assert back.config == tiny.config
        for name, arr in tiny.weights.items():
            assert back.weights[name].tobytes() == arr.tobytes()

    def test_seeded_init_deterministic_through_file(self, tmp_path):
        a = L.init_lm(L.PRESETS["tiny"], seed=42)
        b = L.init_lm(L.PRESETS["tiny"], seed=42)
        pa, pb = tmp_path / "a.flmw", tmp_path / "b.flmw"
        L.save_weights(a, pa)
        L.save_weights(b, pb)
        assert pa.read_bytes() == pb.read_bytes()
        seq = tok.tokenize("hello")
        ra = L.forward_hidden(L.load_weights(pa), seq)
        rb = L.forward_hidden(L.load_weights(pb), seq)
        assert ra.tobytes() == rb.tobytes()

    def test_missing_tensor_rejected(self):
        cfg = L.LMConfig(vocab_size=260, d_model=4, n_layers=1, n_heads=1, d_head=4, max_seq=8)
        weights = {name: np.zeros(shape, dtype=np.float32)
                   for name, shape in L._expected_names(cfg).items()}
        weights.pop("lm_head")
        with pytest.raises(FormatError, match="lm_head"):
            L.FrozenLM(cfg, weights)

    def test_wrong_shape_rejected(self):
        cfg = L.LMConfig(vocab_size=260, d_model=4, n_layers=1, n_heads=1, d_head=4, max_seq=8)
        weights = {name: np.zeros(shape, dtype=np.float32)
                   for name, shape in L._expected_names(cfg).items()}
        weights["lm_head"] = np.zeros((4, 4), dtype=np.float32)
        with pytest.raises(FormatError, match="lm_head"):
            L.FrozenLM(cfg, weights)


class TestLMHead:
    def test_zero_hidden_gives_zero_logits(self, tiny):
        logits = L.lm_head(tiny, np.zeros((3, tiny.d_model), dtype=np.float32))
        np.testing.assert_array_equal(logits, 0.0)

    def test_designed_column_wins_argmax(self):
        cfg = L.LMConfig(vocab_size=260, d_model=4, n_layers=1, n_heads=1, d_head=4, max_seq=8)
        rng = np.random.default_rng(3)
        weights = {name: (rng.standard_normal(shape) * 0.05).astype(np.float32)
                   for name, shape in L._expected_names(cfg).items()}
        head = weights["lm_head"].copy()
        head[:, 77] = np.array([10.0, 0, 0, 0], dtype=np.float32)
        weights["lm_head"] = head
        model = L.FrozenLM(cfg, weights)
        hidden = np.array([[1.0, 0.0, 0.0, 0.0]], dtype=np.float32)
        assert int(L.lm_head(model, hidden).argmax()) == 77

    def test_patch_grid_shape_contract(self, tiny):
        hidden = np.zeros((4, 4, tiny.d_model), dtype=np.float32)
        assert L.lm_head(tiny, hidden).shape == (4, 4, tiny.config.vocab_size)


class TestConfigValidation:
    def test_dims_must_factor(self):
        with pytest.raises(ConfigError):
            L.LMConfig(vocab_size=260, d_model=64, n_layers=1, n_heads=3, d_head=16, max_seq=8)

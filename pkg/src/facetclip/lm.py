"""Frozen decoder-only transformer used as the text encoder.

Inference only: plain float32 numpy, no gradient tape. Weights never change
after construction, so forward passes are pure functions of (tokens, mask,
cache) and safe to share across threads.

Blocks are pre-norm (norm -> attention -> residual, norm -> MLP -> residual)
with rotary positions applied to Q/K, and the output is the post-final-norm
hidden state per position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import flmw
from .errors import CapacityError, ConfigError, FormatError, ShapeError
from .masks import AttentionMaskSpec, CausalMask, FacetMask
from .tokenizer import BYTE_TOKENS, N_SPECIALS

# Seeded-random weights stand in for a pretrained backbone. The scales are
# asymmetric on purpose: near-zero query/key weights make attention diffuse, so
# the extraction position reads an order-insensitive bag of the sequence's
# value vectors; a strong value/output path makes that bag dominate the hidden
# state. This keeps embeddings compositional in the caption's words (similar
# captions land nearby) instead of chaotic in every byte.
INIT_QK_STD = 0.02
INIT_VO_STD = 0.9
INIT_MLP_STD = 0.05
INIT_EMB_STD = 0.15
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 260
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_head: int = 16
    max_seq: int = 1024
    pos_scheme: str = "rotary"

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model {self.d_model} != n_heads {self.n_heads} x d_head {self.d_head}"
            )
        if self.d_head % 2 != 0:
            raise ConfigError(f"rotary positions need an even d_head, got {self.d_head}")
        if self.vocab_size < BYTE_TOKENS + N_SPECIALS:
            raise ConfigError(f"vocab_size {self.vocab_size} too small for byte tokenizer")
        if self.pos_scheme != "rotary":
            raise ConfigError(f"unknown positional scheme {self.pos_scheme!r}")


PRESETS = {
    "tiny": LMConfig(vocab_size=260, d_model=64, n_layers=2, n_heads=4, d_head=16, max_seq=1024),
    "small": LMConfig(vocab_size=260, d_model=128, n_layers=2, n_heads=8, d_head=16, max_seq=1024),
}


@dataclass
class KVCache:
    """Per-layer rotary-position-encoded keys and raw values for one prefix.

    Read-only once built; distributing it across facets shares the arrays.
    """

    span: int
    keys: list[np.ndarray] = field(default_factory=list)    # each (H, span, dh)
    values: list[np.ndarray] = field(default_factory=list)  # each (H, span, dh)


def _expected_names(cfg: LMConfig) -> dict[str, tuple[int, ...]]:
    d, v = cfg.d_model, cfg.vocab_size
    names: dict[str, tuple[int, ...]] = {"tok_emb": (v, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        names[p + "ln1.gain"] = (d,)
        names[p + "ln1.bias"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            names[p + "attn." + w] = (d, d)
        names[p + "ln2.gain"] = (d,)
        names[p + "ln2.bias"] = (d,)
        names[p + "mlp.w1"] = (d, 4 * d)
        names[p + "mlp.w2"] = (4 * d, d)
    names["ln_f.gain"] = (d,)
    names["ln_f.bias"] = (d,)
    names["lm_head"] = (d, v)
    return names


class FrozenLM:
    """Immutable weights + config; the text-encoder backbone and LM head."""

    def __init__(self, config: LMConfig, weights: dict[str, np.ndarray]):
        expected = _expected_names(config)
        for name, shape in expected.items():
            if name not in weights:
                raise FormatError(f"missing tensor {name!r}")
            if weights[name].shape != shape:
                raise FormatError(
                    f"tensor {name!r} has shape {weights[name].shape}, expected {shape}"
                )
        self.config = config
        self.weights = {}
        for name in expected:
            arr = np.ascontiguousarray(weights[name], dtype=np.float32)
            arr.flags.writeable = False
            self.weights[name] = arr
        half = config.d_head // 2
        inv_freq = 10000.0 ** (-np.arange(half, dtype=np.float64) / half)
        angles = np.arange(config.max_seq, dtype=np.float64)[:, None] * inv_freq[None, :]
        self._rope_cos = np.cos(angles).astype(np.float32)
        self._rope_sin = np.sin(angles).astype(np.float32)
        self._rope_cos.flags.writeable = False
        self._rope_sin.flags.writeable = False

    @property
    def d_model(self) -> int:
        return self.config.d_model


def _init_std(name: str) -> float:
    if "attn.wq" in name or "attn.wk" in name:
        return INIT_QK_STD
    if "attn.wv" in name or "attn.wo" in name:
        return INIT_VO_STD
    if "mlp" in name:
        return INIT_MLP_STD
    return INIT_EMB_STD  # tok_emb and lm_head


def init_lm(config: LMConfig, seed: int) -> FrozenLM:
    """Seeded random weights: same (config, seed) gives bit-identical models."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in _expected_names(config).items():
        if name.endswith(".gain"):
            weights[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:
            weights[name] = (rng.standard_normal(shape) * _init_std(name)).astype(np.float32)
    return FrozenLM(config, weights)


def save_weights(lm: FrozenLM, path) -> None:
    cfg = lm.config
    meta = np.array(
        [cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_head, cfg.max_seq],
        dtype=np.float32,
    )
    tensors = {"config": meta}
    tensors.update(lm.weights)
    flmw.write_tensors(path, tensors)


def load_weights(path) -> FrozenLM:
    tensors = flmw.read_tensors(path)
    if "config" not in tensors or tensors["config"].shape != (6,):
        raise FormatError(f"{path}: missing or malformed config tensor")
    v, d, nl, nh, dh, ms = (int(x) for x in tensors.pop("config"))
    config = LMConfig(vocab_size=v, d_model=d, n_layers=nl, n_heads=nh, d_head=dh, max_seq=ms)
    return FrozenLM(config, tensors)


# ---------------------------------------------------------------------------
# Inference kernels (float32 numpy, no tape)
# ---------------------------------------------------------------------------


def _gelu(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + np.float32(0.044715) * x * x * x))
    return np.float32(0.5) * x * (np.float32(1.0) + t)


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + np.float32(1e-5)) * gain + bias


def _softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _apply_rope(lm: FrozenLM, x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """x: (H, T, dh); positions: (T,) absolute indices into the rotary table."""
    half = lm.config.d_head // 2
    cos = lm._rope_cos[positions][None, :, :]
    sin = lm._rope_sin[positions][None, :, :]
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _split_heads(lm: FrozenLM, x: np.ndarray) -> np.ndarray:
    t = x.shape[0]
    return x.reshape(t, lm.config.n_heads, lm.config.d_head).transpose(1, 0, 2)


def _merge_heads(lm: FrozenLM, x: np.ndarray) -> np.ndarray:
    h, t, dh = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(t, h * dh)


def _causal_bias(n_query: int, n_key: int, offset: int) -> np.ndarray:
    """Additive bias: 0 where key u <= offset + t, else -inf."""
    t = np.arange(n_query)[:, None] + offset
    u = np.arange(n_key)[None, :]
    return np.where(u <= t, np.float32(0.0), np.float32(-np.inf))


def _qkv(lm: FrozenLM, layer: int, x: np.ndarray, positions: np.ndarray):
    w = lm.weights
    p = f"layers.{layer}."
    h = _layer_norm(x, w[p + "ln1.gain"], w[p + "ln1.bias"])
    q = _split_heads(lm, h @ w[p + "attn.wq"])
    k = _split_heads(lm, h @ w[p + "attn.wk"])
    v = _split_heads(lm, h @ w[p + "attn.wv"])
    q = _apply_rope(lm, q, positions)
    k = _apply_rope(lm, k, positions)
    return q, k, v


def _finish_layer(lm: FrozenLM, layer: int, x: np.ndarray, attn: np.ndarray) -> np.ndarray:
    w = lm.weights
    p = f"layers.{layer}."
    x = x + _merge_heads(lm, attn) @ w[p + "attn.wo"]
    h2 = _layer_norm(x, w[p + "ln2.gain"], w[p + "ln2.bias"])
    return x + _gelu(h2 @ w[p + "mlp.w1"]) @ w[p + "mlp.w2"]


def _forward_causal(
    lm: FrozenLM,
    tokens: list[int],
    cache: KVCache | None,
    collect_cache: bool,
) -> tuple[np.ndarray, KVCache | None]:
    cfg = lm.config
    offset = cache.span if cache is not None else 0
    t_new = len(tokens)
    scale = np.float32(1.0 / math.sqrt(cfg.d_head))
    positions = np.arange(offset, offset + t_new)
    x = lm.weights["tok_emb"][np.asarray(tokens, dtype=np.int64)]
    new_cache = KVCache(span=offset + t_new) if collect_cache else None
    bias = _causal_bias(t_new, offset + t_new, offset)[None, :, :]
    for li in range(cfg.n_layers):
        q, k, v = _qkv(lm, li, x, positions)
        if cache is not None:
            k_all = np.concatenate([cache.keys[li], k], axis=1)
            v_all = np.concatenate([cache.values[li], v], axis=1)
        else:
            k_all, v_all = k, v
        if new_cache is not None:
            new_cache.keys.append(k_all)
            new_cache.values.append(v_all)
        scores = q @ k_all.swapaxes(1, 2) * scale + bias
        attn = _softmax(scores) @ v_all
        x = _finish_layer(lm, li, x, attn)
    hidden = _layer_norm(x, lm.weights["ln_f.gain"], lm.weights["ln_f.bias"])
    return hidden, new_cache


def _forward_facets(lm: FrozenLM, tokens: list[int], mask: FacetMask) -> np.ndarray:
    """One pass over a ⟨prefix, facets⟩ layout sharing the prefix KV cache.

    Each facet's tokens get virtual rotary positions restarting at prefix_end,
    so every facet behaves exactly as if it directly followed the prefix.
    """
    cfg = lm.config
    p = mask.prefix_end
    if mask.length != len(tokens):
        raise ShapeError(f"facet mask covers {mask.length} positions, got {len(tokens)} tokens")
    prefix_hidden, cache = _forward_causal(lm, tokens[:p], cache=None, collect_cache=True)
    if not mask.spans:
        return prefix_hidden

    scale = np.float32(1.0 / math.sqrt(cfg.d_head))
    local_spans = [(s - p, e - p) for s, e in mask.spans]
    positions = np.empty(len(tokens) - p, dtype=np.int64)
    for ls, le in local_spans:
        positions[ls:le] = np.arange(p, p + (le - ls))
    # Per-facet within-span causal bias, prefix keys always visible.
    biases = [
        np.concatenate(
            [np.zeros((le - ls, p), dtype=np.float32), _causal_bias(le - ls, le - ls, 0)],
            axis=1,
        )[None, :, :]
        for ls, le in local_spans
    ]

    x = lm.weights["tok_emb"][np.asarray(tokens[p:], dtype=np.int64)]
    for li in range(cfg.n_layers):
        q, k, v = _qkv(lm, li, x, positions)
        parts = []
        for (ls, le), bias in zip(local_spans, biases):
            k_f = np.concatenate([cache.keys[li], k[:, ls:le]], axis=1)
            v_f = np.concatenate([cache.values[li], v[:, ls:le]], axis=1)
            scores = q[:, ls:le] @ k_f.swapaxes(1, 2) * scale + bias
            parts.append(_softmax(scores) @ v_f)
        attn = np.concatenate(parts, axis=1)
        x = _finish_layer(lm, li, x, attn)
    suffix_hidden = _layer_norm(x, lm.weights["ln_f.gain"], lm.weights["ln_f.bias"])
    return np.concatenate([prefix_hidden, suffix_hidden], axis=0)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def forward_hidden(
    lm: FrozenLM,
    tokens: list[int],
    mask: AttentionMaskSpec | None = None,
    cache: KVCache | None = None,
) -> np.ndarray:
    """Last-layer hidden states, one row per input token.

    With the causal mask, position t depends only on tokens <= t (plus the
    cache, which stands for the tokens before them).
    """
    if mask is None:
        mask = CausalMask()
    span = cache.span if cache is not None else 0
    if len(tokens) + span > lm.config.max_seq:
        raise CapacityError(
            f"sequence of {len(tokens)} tokens + cache span {span} exceeds max_seq {lm.config.max_seq}"
        )
    for t in tokens:
        if not 0 <= t < lm.config.vocab_size:
            raise ShapeError(f"token id {t} outside vocab of size {lm.config.vocab_size}")
    if isinstance(mask, FacetMask):
        if cache is not None:
            raise ConfigError("facet forward builds its own prefix cache; pass cache=None")
        return _forward_facets(lm, tokens, mask)
    hidden, _ = _forward_causal(lm, tokens, cache, collect_cache=False)
    return hidden


def build_kv_cache(lm: FrozenLM, prefix: list[int]) -> KVCache:
    """Keys/values of a causal pass over `prefix`, reusable by any continuation."""
    if len(prefix) > lm.config.max_seq:
        raise CapacityError(f"prefix of {len(prefix)} tokens exceeds max_seq {lm.config.max_seq}")
    if not prefix:
        cfg = lm.config
        empty = [np.zeros((cfg.n_heads, 0, cfg.d_head), dtype=np.float32) for _ in range(cfg.n_layers)]
        return KVCache(span=0, keys=list(empty), values=[e.copy() for e in empty])
    _, cache = _forward_causal(lm, prefix, cache=None, collect_cache=True)
    return cache


def lm_head(lm: FrozenLM, hidden: np.ndarray) -> np.ndarray:
    """Vocabulary logits: hidden (..., d_model) -> (..., vocab_size)."""
    if hidden.shape[-1] != lm.config.d_model:
        raise ShapeError(
            f"hidden last dim {hidden.shape[-1]} != d_model {lm.config.d_model}"
        )
    return hidden @ lm.weights["lm_head"]

"""Trainable vision transformer: global class-token feature plus patch features.

Runs on the gradient tape. Batched forward keeps the op count small: linears
see (N*T, d) matrices and attention runs as stacked (N*heads, T, T) products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 16
    d_v: int = 64
    n_layers: int = 2
    n_heads: int = 4
    global_pool: str = "cls"  # "cls" or "mean"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_v % self.n_heads != 0:
            raise ConfigError(f"d_v {self.d_v} not divisible by n_heads {self.n_heads}")
        if self.global_pool not in ("cls", "mean"):
            raise ConfigError(f"unknown global_pool {self.global_pool!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


class VisionTransformer:
    def __init__(self, config: ViTConfig, seed: int):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d_v
        std = 0.02

        def w(shape, s=std):
            return T.randn(rng, shape, std=s, requires_grad=True)

        self.params: dict[str, T.Tensor] = {}
        p = self.params
        p["patch.w"] = w((config.patch_dim, d), s=1.0 / np.sqrt(config.patch_dim))
        p["patch.b"] = T.zeros(d, requires_grad=True)
        p["cls"] = w((d,))
        p["pos"] = w((config.n_tokens, d))
        for i in range(config.n_layers):
            pre = f"layers.{i}."
            p[pre + "ln1.gain"] = T.ones(d, requires_grad=True)
            p[pre + "ln1.bias"] = T.zeros(d, requires_grad=True)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + "attn." + name] = w((d, d), s=1.0 / np.sqrt(d))
                p[pre + "attn." + name + "_b"] = T.zeros(d, requires_grad=True)
            p[pre + "ln2.gain"] = T.ones(d, requires_grad=True)
            p[pre + "ln2.bias"] = T.zeros(d, requires_grad=True)
            p[pre + "mlp.w1"] = w((d, 4 * d), s=1.0 / np.sqrt(d))
            p[pre + "mlp.b1"] = T.zeros(4 * d, requires_grad=True)
            p[pre + "mlp.w2"] = w((4 * d, d), s=1.0 / np.sqrt(4 * d))
            p[pre + "mlp.b2"] = T.zeros(d, requires_grad=True)
        p["ln_f.gain"] = T.ones(d, requires_grad=True)
        p["ln_f.bias"] = T.zeros(d, requires_grad=True)

    def parameters(self) -> list[tuple[str, T.Tensor]]:
        return list(self.params.items())

    # -- forward ------------------------------------------------------------

    def _affine(self, x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
        """x: (rows, d_in) -> (rows, d_out)."""
        out = T.matmul(x, w)
        return T.add(out, T.expand_leading(b, x.shape[0]))

    def _attention(self, x: T.Tensor, layer: int, n: int) -> T.Tensor:
        cfg = self.config
        t, d = cfg.n_tokens, cfg.d_v
        h = cfg.n_heads
        dh = d // h
        pre = f"layers.{layer}.attn."
        flat = T.reshape(x, (n * t, d))

        def heads(name):
            y = self._affine(flat, self.params[pre + name], self.params[pre + name + "_b"])
            y = T.reshape(y, (n, t, h, dh))
            y = T.transpose(y, (0, 2, 1, 3))
            return T.reshape(y, (n * h, t, dh))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        attn = T.matmul(T.softmax_lastdim(scores), v)
        attn = T.reshape(attn, (n, h, t, dh))
        attn = T.reshape(T.transpose(attn, (0, 2, 1, 3)), (n * t, d))
        out = self._affine(attn, self.params[pre + "wo"], self.params[pre + "wo_b"])
        return T.reshape(out, (n, t, d))

    def encode_batch(self, patches: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
        """patches: (N, n_patches, patch_dim) float32 -> (global (N, d), tokens (N, n_patches, d))."""
        cfg = self.config
        n = patches.shape[0]
        if patches.shape[1:] != (cfg.n_patches, cfg.patch_dim):
            raise ShapeError(
                f"patches shape {patches.shape} does not match config "
                f"({cfg.n_patches}, {cfg.patch_dim})"
            )
        x = T.tensor(patches.reshape(n * cfg.n_patches, cfg.patch_dim))
        x = self._affine(x, self.params["patch.w"], self.params["patch.b"])
        x = T.reshape(x, (n, cfg.n_patches, cfg.d_v))
        cls = T.reshape(T.expand_leading(self.params["cls"], n), (n, 1, cfg.d_v))
        x = T.concat(cls, x, axis=1)
        x = T.add(x, T.expand_leading(self.params["pos"], n))
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            hn = T.layer_norm(x, self.params[pre + "ln1.gain"], self.params[pre + "ln1.bias"])
            x = T.add(x, self._attention(hn, i, n))
            hn = T.layer_norm(x, self.params[pre + "ln2.gain"], self.params[pre + "ln2.bias"])
            flat = T.reshape(hn, (n * cfg.n_tokens, cfg.d_v))
            m = T.gelu(self._affine(flat, self.params[pre + "mlp.w1"], self.params[pre + "mlp.b1"]))
            m = self._affine(m, self.params[pre + "mlp.w2"], self.params[pre + "mlp.b2"])
            x = T.add(x, T.reshape(m, (n, cfg.n_tokens, cfg.d_v)))
        x = T.layer_norm(x, self.params["ln_f.gain"], self.params["ln_f.bias"])
        patch_tokens = T.slice_axis(x, 1, 1, cfg.n_tokens)
        if cfg.global_pool == "cls":
            g = T.reshape(T.slice_axis(x, 1, 0, 1), (n, cfg.d_v))
        else:
            g = T.scale(
                T.reshape(
                    T.matmul(
                        T.tensor(np.ones((n, 1, cfg.n_patches), dtype=np.float32)), patch_tokens
                    ),
                    (n, cfg.d_v),
                ),
                1.0 / cfg.n_patches,
            )
        return g, patch_tokens


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(N, 3, S, S) -> (N, (S/P)^2, 3*P*P): row-major grid of flattened patches."""
    n, c, s, _ = images.shape
    g = s // patch_size
    x = images.reshape(n, c, g, patch_size, g, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (N, gy, gx, C, P, P)
    return np.ascontiguousarray(x.reshape(n, g * g, c * patch_size * patch_size))


def encode_image(model: VisionTransformer, img: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
    """Single image (3, S, S) -> (global (d_v,), patches (n_patches, d_v))."""
    cfg = model.config
    if img.shape != (3, cfg.image_size, cfg.image_size):
        raise ShapeError(f"image shape {img.shape} does not match config {cfg.image_size}")
    g, patch_tokens = model.encode_batch(patchify(img[None], cfg.patch_size))
    return T.reshape(g, (cfg.d_v,)), T.reshape(patch_tokens, (cfg.n_patches, cfg.d_v))

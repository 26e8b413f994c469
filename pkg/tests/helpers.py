"""Shared oracles for the test suite: finite differences and gradient agreement."""

from __future__ import annotations

import numpy as np


def finite_difference(params, loss_fn, step: float = 1e-3) -> list[np.ndarray]:
    """Central-difference gradient of loss_fn() wrt each param's float32 data.

    loss_fn must re-run the forward pass from the params' current contents and
    return a python float. Differences are taken in float64 on top of the
    float32 evaluations, which is the precision the pipeline itself has.
    """
    out = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + np.float32(step)
            lo_hi = float(loss_fn())
            flat[i] = orig - np.float32(step)
            lo_lo = float(loss_fn())
            flat[i] = orig
            g[i] = (lo_hi - lo_lo) / (2.0 * step)
        out.append(g.reshape(p.data.shape))
    return out


def grad_agreement(analytic: np.ndarray, numeric: np.ndarray,
                   rel_tol: float = 1e-2, abs_floor: float = 1e-4) -> np.ndarray:
    """Elementwise agreement mask: relative error under rel_tol, with an
    absolute floor absorbing float32 finite-difference noise near zero."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.abs(a), np.abs(b))
    return (np.abs(a - b) <= rel_tol * denom) | (np.abs(a - b) <= abs_floor)


# ---------------------------------------------------------------------------
# Independent float64 reference forward for the vision transformer. Used as
# the high-precision oracle when finite differences of the float32 pipeline
# would drown in rounding noise.
# ---------------------------------------------------------------------------


def _ref_ln(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def _ref_gelu(x):
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def _ref_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def ref_contrastive_loss(text: np.ndarray, image: np.ndarray, tau: float) -> float:
    """Brute-force float64 double-loop of the symmetric multi-facet loss.

    Independent of the tensor-op implementation: explicit cosines, explicit
    log-sum-exp per anchor, python-level loops over (sample, facet).
    """
    text = np.asarray(text, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    n, k, _ = text.shape

    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    def nll(scores, gold):
        m = max(scores)
        return -(scores[gold] - m) + np.log(np.sum(np.exp(np.array(scores) - m)))

    total_i = 0.0
    total_t = 0.0
    for i in range(n):
        for f in range(k):
            # text anchor (i, f) classifies over the n images
            s_t = [cos(text[i, f], image[j]) / tau for j in range(n)]
            total_t += nll(s_t, i)
            # image anchor (i, f) classifies over the n texts within facet f
            s_i = [cos(text[j, f], image[i]) / tau for j in range(n)]
            total_i += nll(s_i, i)
    return 0.5 * (total_i + total_t) / (n * k)


def ref_projection(params: dict, x: np.ndarray) -> np.ndarray:
    """float64 reference of the two-layer projection head."""
    h = x @ params["w1"] + params["b1"]
    h = _ref_gelu(h)
    return h @ params["w2"] + params["b2"]


def ref_vit_global(params: dict, cfg, patches: np.ndarray) -> np.ndarray:
    """float64 reimplementation of VisionTransformer.encode_batch's global path.

    params maps name -> float64 array (same names as the model's param dict);
    patches is (N, n_patches, patch_dim).
    """
    n = patches.shape[0]
    t, d, h = cfg.n_tokens, cfg.d_v, cfg.n_heads
    dh = d // h
    x = patches.astype(np.float64) @ params["patch.w"] + params["patch.b"]
    cls = np.broadcast_to(params["cls"], (n, 1, d))
    x = np.concatenate([cls, x], axis=1) + params["pos"]
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        hn = _ref_ln(x, params[pre + "ln1.gain"], params[pre + "ln1.bias"])

        def head_proj(name):
            y = hn @ params[pre + "attn." + name] + params[pre + "attn." + name + "_b"]
            return y.reshape(n, t, h, dh).transpose(0, 2, 1, 3)

        q, k, v = head_proj("wq"), head_proj("wk"), head_proj("wv")
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        attn = _ref_softmax(scores) @ v
        attn = attn.transpose(0, 2, 1, 3).reshape(n, t, d)
        x = x + attn @ params[pre + "attn.wo"] + params[pre + "attn.wo_b"]
        hn = _ref_ln(x, params[pre + "ln2.gain"], params[pre + "ln2.bias"])
        m = _ref_gelu(hn @ params[pre + "mlp.w1"] + params[pre + "mlp.b1"])
        x = x + m @ params[pre + "mlp.w2"] + params[pre + "mlp.b2"]
    x = _ref_ln(x, params["ln_f.gain"], params["ln_f.bias"])
    if cfg.global_pool == "cls":
        return x[:, 0, :]
    return x[:, 1:, :].mean(axis=1)

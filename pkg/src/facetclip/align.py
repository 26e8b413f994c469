"""Contrastive alignment of the trainable visual encoder with stored text embeddings.

The frozen LM never appears here: its output enters only as (N, K, d_t) blocks
of precomputed (or freshly computed) facet embeddings. The loss is symmetric:
each (image, facet) anchor classifies over the batch's texts within that facet,
and each (text, facet) anchor classifies over the batch's images.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import flmw
from . import tensor as T
from .errors import ConfigError, NotFoundError, NumericError, ShapeError
from .image import preprocess_file
from .vit import VisionTransformer, ViTConfig, patchify

TAU_MIN = 0.01
TAU_MAX = 1.0


class Projection:
    """Two affine layers d_v -> d_t -> d_t with a GELU between."""

    def __init__(self, d_v: int, d_t: int, seed: int):
        rng = np.random.default_rng(seed)
        self.d_v, self.d_t = d_v, d_t
        self.params = {
            "w1": T.randn(rng, (d_v, d_t), std=1.0 / math.sqrt(d_v), requires_grad=True),
            "b1": T.zeros(d_t, requires_grad=True),
            "w2": T.randn(rng, (d_t, d_t), std=1.0 / math.sqrt(d_t), requires_grad=True),
            "b2": T.zeros(d_t, requires_grad=True),
        }

    def __call__(self, x: T.Tensor) -> T.Tensor:
        n = x.shape[0]
        h = T.add(T.matmul(x, self.params["w1"]), T.expand_leading(self.params["b1"], n))
        h = T.gelu(h)
        return T.add(T.matmul(h, self.params["w2"]), T.expand_leading(self.params["b2"], n))


class Temperature:
    """Learnable similarity temperature, stored as log(1/tau)."""

    def __init__(self, tau_init: float = 0.07):
        if not TAU_MIN <= tau_init <= TAU_MAX:
            raise ConfigError(f"tau_init {tau_init} outside [{TAU_MIN}, {TAU_MAX}]")
        self.log_inv_tau = T.tensor(math.log(1.0 / tau_init), requires_grad=True)

    @property
    def tau(self) -> float:
        return float(np.exp(-self.log_inv_tau.data))

    def clamp(self) -> None:
        lo, hi = math.log(1.0 / TAU_MAX), math.log(1.0 / TAU_MIN)
        np.clip(self.log_inv_tau.data, lo, hi, out=self.log_inv_tau.data)


class AlignModel:
    """Visual encoder + projection + temperature; the trainable side."""

    def __init__(self, vit_config: ViTConfig, d_t: int, seed: int, tau_init: float = 0.07):
        self.vit = VisionTransformer(vit_config, seed=seed)
        self.proj = Projection(vit_config.d_v, d_t, seed=seed + 1)
        self.temp = Temperature(tau_init)
        self.d_t = d_t

    def parameters(self) -> list[tuple[str, T.Tensor]]:
        out = [("vit." + n, p) for n, p in self.vit.parameters()]
        out += [("proj." + n, p) for n, p in self.proj.params.items()]
        out.append(("temp.log_inv_tau", self.temp.log_inv_tau))
        return out

    def project_images(self, patches: np.ndarray) -> T.Tensor:
        """(N, n_patches, patch_dim) -> projected (N, d_t)."""
        g, _ = self.vit.encode_batch(patches)
        return self.proj(g)


def _as_log_inv_tau(tau) -> T.Tensor:
    if isinstance(tau, Temperature):
        return tau.log_inv_tau
    if isinstance(tau, T.Tensor):
        return tau
    return T.tensor(math.log(1.0 / float(tau)))


def contrastive_loss_components(text: T.Tensor, image: T.Tensor, tau) -> tuple[T.Tensor, T.Tensor]:
    """The two halves of the symmetric loss, each normalized by its N*K anchors.

    Returns (image-anchored, text-anchored): the first classifies each (image,
    facet) anchor over the batch's texts within that facet, the second each
    (text, facet) anchor over the batch's images.
    """
    if text.ndim != 3 or image.ndim != 2:
        raise ShapeError(f"expected text (N,K,d) and image (N,d), got {text.shape}, {image.shape}")
    n, k, d = text.shape
    if image.shape != (n, d):
        raise ShapeError(f"image shape {image.shape} does not pair with text {text.shape}")
    if np.isnan(text.data).any() or np.isnan(image.data).any():
        raise NumericError("contrastive_loss: NaN in embeddings")
    log_inv_tau = _as_log_inv_tau(tau)
    scale_t = T.exp(log_inv_tau)
    tn = T.l2_normalize_lastdim(text)
    im = T.transpose(T.l2_normalize_lastdim(image))  # (d, N)
    diag = np.arange(n)
    loss_i: T.Tensor | None = None
    loss_t: T.Tensor | None = None
    for f in range(k):
        t_f = T.reshape(T.slice_axis(tn, 1, f, f + 1), (n, d))
        sim = T.matmul(t_f, im)  # sim[j, i] = cos(text_j_facet_f, image_i)
        logits_t = T.mul_by_scalar_tensor(sim, scale_t)
        logits_i = T.mul_by_scalar_tensor(T.transpose(sim), scale_t)
        lt = T.softmax_cross_entropy(logits_t, diag)
        li = T.softmax_cross_entropy(logits_i, diag)
        loss_t = lt if loss_t is None else T.add(loss_t, lt)
        loss_i = li if loss_i is None else T.add(loss_i, li)
    return T.scale(loss_i, 1.0 / k), T.scale(loss_t, 1.0 / k)


def contrastive_loss(text: T.Tensor, image: T.Tensor, tau) -> T.Tensor:
    """Symmetric multi-facet InfoNCE: mean of the two anchored components."""
    loss_i, loss_t = contrastive_loss_components(text, image, tau)
    return T.scale(T.add(loss_i, loss_t), 0.5)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled weight decay; decay applies to rank >= 2 tensors only."""

    def __init__(self, params: list[tuple[str, T.Tensor]], weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-8):
        self.named = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = np.float32(eps)
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}

    def step(self, step_index: int, lr: float) -> None:
        t = step_index + 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        c1 = np.float32(1.0 - self.beta1 ** t)
        c2 = np.float32(1.0 - self.beta2 ** t)
        lr32 = np.float32(lr)
        for name, p in self.named:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (np.float32(1.0) - b1) * g
            v *= b2
            v += (np.float32(1.0) - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + np.float32(self.weight_decay) * p.data
            p.data -= lr32 * update


def lr_at(step: int, total_steps: int, peak: float, warmup: int) -> float:
    """Linear warmup from 0 to peak, then cosine decay toward 0."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total_steps <= warmup:
        return peak
    progress = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    warmup: int = 100
    schedule: str = "cosine"
    seed: int = 0
    tau_init: float = 0.07

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule != "cosine":
            raise ConfigError(f"unknown schedule {self.schedule!r}")


class TextSource(Protocol):
    k: int
    d_t: int

    def batch(self, sample_ids) -> np.ndarray: ...


class CombinedTextSource:
    """Several sources presented as one: facet blocks concatenate along K.

    Used to train against multiple caption sources (long and raw captions) at
    once; each sample's target block is the stack of every source's facets.
    """

    def __init__(self, sources: list):
        if not sources:
            raise ConfigError("need at least one text source")
        d_ts = {s.d_t for s in sources}
        if len(d_ts) != 1:
            raise ConfigError(f"text sources disagree on d_t: {d_ts}")
        self.sources = sources
        self.k = sum(s.k for s in sources)
        self.d_t = d_ts.pop()

    def batch(self, sample_ids) -> np.ndarray:
        return np.concatenate([s.batch(sample_ids) for s in self.sources], axis=1)


class OnTheFlyTextSource:
    """Text embeddings computed per batch; bit-identical to the offline store."""

    def __init__(self, lm, corpus, prompts):
        from .facets import embed_multifacet  # local import keeps layering acyclic

        self._embed = embed_multifacet
        self.lm = lm
        self.prompts = prompts
        self.captions = {r.sample_id: r.caption for r in corpus}
        self.k = len(prompts)
        self.d_t = lm.config.d_model

    def batch(self, sample_ids) -> np.ndarray:
        rows = []
        for s in sample_ids:
            if int(s) not in self.captions:
                raise NotFoundError(f"sample id {int(s)} not in corpus")
            rows.append(self._embed(self.lm, self.captions[int(s)], self.prompts).vectors)
        return np.stack(rows)


@dataclass
class StepMetrics:
    step: int
    loss: float
    lr: float
    tau: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "loss": self.loss, "lr": self.lr, "tau": self.tau})


def batch_ids(all_ids: np.ndarray, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Deterministic batch sampler: a pure function of (seed, step)."""
    rng = np.random.default_rng([seed, step])
    return rng.choice(all_ids, size=batch_size, replace=False)


@dataclass
class TrainResult:
    metrics: list[StepMetrics] = field(default_factory=list)
    final_step: int = 0


def train(
    config: TrainConfig,
    corpus,
    text_source: TextSource,
    model: AlignModel,
    *,
    log_path: str | Path | None = None,
    resume_from: str | Path | None = None,
    stop_after_step: int | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainResult:
    """AdamW training of (ViT, projection, temperature) against stored text embeddings."""
    records = sorted(corpus, key=lambda r: r.sample_id)
    if config.batch_size > len(records):
        raise ConfigError(
            f"batch_size {config.batch_size} exceeds corpus size {len(records)}"
        )
    all_ids = np.array([r.sample_id for r in records], dtype=np.int64)

    patch_cfg = model.vit.config
    patch_cache = {}
    for r in records:
        img = preprocess_file(r.image_path, patch_cfg.image_size)
        patch_cache[r.sample_id] = patchify(img[None], patch_cfg.patch_size)[0]

    opt = AdamW(
        model.parameters(),
        weight_decay=config.weight_decay,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
    )
    start_step = 0
    if resume_from is not None:
        start_step = load_checkpoint(resume_from, model, opt)
    end_step = config.steps if stop_after_step is None else min(config.steps, stop_after_step)

    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    result = TrainResult(final_step=start_step)
    try:
        for step in range(start_step, end_step):
            ids = batch_ids(all_ids, config.batch_size, config.seed, step)
            text = T.tensor(text_source.batch(ids))
            patches = np.stack([patch_cache[int(i)] for i in ids])
            with T.GradTape() as tape:
                params = model.parameters()
                tape.watch([p for _, p in params])
                image = model.project_images(patches)
                loss = contrastive_loss(text, image, model.temp)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise NumericError(f"non-finite loss at step {step}")
                tape.backward(loss)
            lr = lr_at(step, config.steps, config.lr, config.warmup)
            opt.step(step, lr)
            model.temp.clamp()
            metric = StepMetrics(step=step, loss=loss_val, lr=lr, tau=model.temp.tau)
            result.metrics.append(metric)
            if log_file:
                log_file.write(metric.to_json() + "\n")
            result.final_step = step + 1
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, opt, result.final_step)
    return result


# ---------------------------------------------------------------------------
# Checkpoints: model params + optimizer state + step, in one FLMW container
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: AlignModel, opt: AdamW | None, step: int) -> None:
    vc = model.vit.config
    arch = np.array(
        [vc.image_size, vc.patch_size, vc.d_v, vc.n_layers, vc.n_heads,
         1.0 if vc.global_pool == "mean" else 0.0, model.d_t],
        dtype=np.float32,
    )
    tensors: dict[str, np.ndarray] = {
        "meta/step": np.array(float(step), dtype=np.float32),
        "meta/arch": arch,
    }
    for name, p in model.parameters():
        tensors["model/" + name] = p.data
    if opt is not None:
        for name, _ in opt.named:
            tensors["opt/m/" + name] = opt.m[name]
            tensors["opt/v/" + name] = opt.v[name]
    flmw.write_tensors(path, tensors)


def load_model(path: str | Path) -> tuple[AlignModel, int]:
    """Reconstruct an AlignModel from a checkpoint's architecture metadata."""
    tensors = flmw.read_tensors(path)
    if "meta/arch" not in tensors:
        raise NotFoundError(f"{path}: checkpoint has no architecture metadata")
    size, patch, d_v, layers, heads, pool, d_t = (int(x) for x in tensors["meta/arch"])
    cfg = ViTConfig(image_size=size, patch_size=patch, d_v=d_v, n_layers=layers,
                    n_heads=heads, global_pool="mean" if pool else "cls")
    model = AlignModel(cfg, d_t=d_t, seed=0)
    step = load_checkpoint(path, model)
    return model, step


def load_checkpoint(path: str | Path, model: AlignModel, opt: AdamW | None = None) -> int:
    tensors = flmw.read_tensors(path)
    for name, p in model.parameters():
        key = "model/" + name
        if key not in tensors:
            raise NotFoundError(f"checkpoint missing tensor {key!r}")
        if tensors[key].shape != p.data.shape:
            raise ShapeError(
                f"checkpoint tensor {key!r} has shape {tensors[key].shape}, "
                f"model expects {p.data.shape}"
            )
        p.data[...] = tensors[key]
    if opt is not None:
        for name, _ in opt.named:
            for prefix, table in (("opt/m/", opt.m), ("opt/v/", opt.v)):
                key = prefix + name
                if key not in tensors:
                    raise NotFoundError(f"checkpoint missing tensor {key!r}")
                if tensors[key].shape != table[name].shape:
                    raise ShapeError(
                        f"checkpoint tensor {key!r} has shape {tensors[key].shape}, "
                        f"optimizer expects {table[name].shape}"
                    )
                table[name][...] = tensors[key]
    return int(tensors["meta/step"])

"""Evaluation: retrieval recall@k, zero-shot classification, patch vocabulary maps."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .align import AlignModel
from .errors import ConfigError, NumericError
from .facets import embed_naive
from .image import encode_ppm
from .lm import FrozenLM, lm_head
from .prompts import PromptSet
from .tokenizer import token_str
from .vit import encode_image, patchify

DEFAULT_KS = (1, 5, 10)
DEFAULT_TEMPLATE = "a photo of a {label}"


def _normalize_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms <= 1e-12).any():
        raise NumericError(f"{what}: zero-norm embedding, cosine undefined")
    return x / norms


@dataclass(frozen=True)
class RetrievalReport:
    direction: str  # "I2T" or "T2I"
    recalls: dict[int, float]
    n_queries: int

    def __post_init__(self):
        ks = sorted(self.recalls)
        vals = [self.recalls[k] for k in ks]
        if any(b < a for a, b in zip(vals, vals[1:])) or any(v > 1.0 for v in vals):
            raise ConfigError(f"recall values must be nondecreasing in k and <= 1: {self.recalls}")

    def to_json(self) -> str:
        return json.dumps({
            "direction": self.direction,
            "n_queries": self.n_queries,
            **{f"recall@{k}": round(v, 6) for k, v in sorted(self.recalls.items())},
        })

    def to_text(self) -> str:
        cells = "  ".join(f"R@{k}={v:6.4f}" for k, v in sorted(self.recalls.items()))
        return f"{self.direction:>3}  n={self.n_queries:<5d} {cells}"


def rank_of_gold(query_embs: np.ndarray, cand_embs: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Rank (0-based) of each query's gold candidate under cosine, descending,
    ties broken toward the lower candidate index."""
    q = _normalize_rows(np.asarray(query_embs, dtype=np.float64), "query embeddings")
    c = _normalize_rows(np.asarray(cand_embs, dtype=np.float64), "candidate embeddings")
    sims = q @ c.T
    order = np.argsort(-sims, axis=1, kind="stable")
    ranks = np.empty(len(gold), dtype=np.int64)
    for i, g in enumerate(np.asarray(gold, dtype=np.int64)):
        ranks[i] = int(np.nonzero(order[i] == g)[0][0])
    return ranks


def recall_at_k(
    query_embs: np.ndarray,
    cand_embs: np.ndarray,
    gold,
    ks=DEFAULT_KS,
    direction: str = "I2T",
) -> RetrievalReport:
    gold = np.asarray(gold, dtype=np.int64)
    n_cand = len(cand_embs)
    for k in ks:
        if k > n_cand:
            raise ConfigError(f"recall@{k} undefined with only {n_cand} candidates")
    if gold.min() < 0 or gold.max() >= n_cand:
        raise ConfigError("gold indices out of range")
    ranks = rank_of_gold(query_embs, cand_embs, gold)
    recalls = {int(k): float((ranks < k).mean()) for k in ks}
    return RetrievalReport(direction=direction, recalls=recalls, n_queries=len(gold))


# ---------------------------------------------------------------------------
# Zero-shot classification
# ---------------------------------------------------------------------------


def classify_by_similarity(image_feats: np.ndarray, class_embs: np.ndarray) -> np.ndarray:
    """Argmax cosine per image; ties go to the lower label index."""
    q = _normalize_rows(np.asarray(image_feats, dtype=np.float64), "image features")
    c = _normalize_rows(np.asarray(class_embs, dtype=np.float64), "label embeddings")
    return (q @ c.T).argmax(axis=1)


def label_embeddings(
    lm: FrozenLM, prompts: PromptSet, labels: list[str], template: str = DEFAULT_TEMPLATE
) -> np.ndarray:
    """Each label's caption, embedded with the short-input default prompt."""
    if "{label}" not in template:
        raise ConfigError(f"template {template!r} does not contain '{{label}}'")
    if not labels:
        raise ConfigError("labels must be nonempty")
    short = prompts.short_prompt()
    return np.stack([
        embed_naive(lm, template.replace("{label}", lab), short) for lab in labels
    ])


def project_images(model: AlignModel, images: list[np.ndarray]) -> np.ndarray:
    """Preprocessed images -> projected (N, d_t) features, no gradients."""
    patches = patchify(np.stack(images), model.vit.config.patch_size)
    return model.project_images(patches).data


def zero_shot_classify(
    model: AlignModel,
    lm: FrozenLM,
    prompts: PromptSet,
    images: list[np.ndarray],
    gold,
    labels: list[str],
    template: str = DEFAULT_TEMPLATE,
) -> float:
    """Accuracy of template-based label matching against projected image features."""
    class_embs = label_embeddings(lm, prompts, labels, template)
    feats = project_images(model, images)
    preds = classify_by_similarity(feats, class_embs)
    return float((preds == np.asarray(gold, dtype=np.int64)).mean())


# ---------------------------------------------------------------------------
# Vocabulary mapping: patch features -> projection -> LM head -> words
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VocabMap:
    grid: tuple[tuple[tuple[int, str], ...], ...]  # [row][col] -> (token id, text)
    pool_window: int

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.grid), len(self.grid[0])

    def token_ids(self) -> np.ndarray:
        return np.array([[cell[0] for cell in row] for row in self.grid], dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps({
            "pool_window": self.pool_window,
            "grid": [[{"token": tid, "text": txt} for tid, txt in row] for row in self.grid],
        })

    def to_text(self) -> str:
        width = max(max(len(repr(txt)) for _, txt in row) for row in self.grid)
        return "\n".join(
            " ".join(repr(txt).ljust(width) for _, txt in row) for row in self.grid
        )


def vocab_map(model: AlignModel, lm: FrozenLM, image: np.ndarray, pool_window: int = 1) -> VocabMap:
    """Interpret (pooled) patch features as vocabulary tokens via the LM head."""
    cfg = model.vit.config
    grid = cfg.grid
    if pool_window < 1 or grid % pool_window != 0:
        raise ConfigError(f"pool window {pool_window} does not divide patch grid {grid}")
    _, patch_feats = encode_image(model.vit, image)
    feats = patch_feats.data.reshape(grid, grid, cfg.d_v)
    g2 = grid // pool_window
    pooled = feats.reshape(g2, pool_window, g2, pool_window, cfg.d_v).mean(axis=(1, 3))
    projected = model.proj(T.tensor(pooled.reshape(g2 * g2, cfg.d_v))).data
    logits = lm_head(lm, projected)
    ids = logits.argmax(axis=-1).reshape(g2, g2)
    rows = tuple(
        tuple((int(t), token_str(int(t))) for t in row) for row in ids
    )
    return VocabMap(grid=rows, pool_window=pool_window)


def render_overlay(image01: np.ndarray, vmap: VocabMap) -> bytes:
    """PPM copy of the [0,1] image with white grid lines at pooled-cell borders."""
    img = np.asarray(image01, dtype=np.float32).copy()
    _, h, w = img.shape
    rows, cols = vmap.shape
    for r in range(1, rows):
        img[:, (h * r) // rows, :] = 1.0
    for c in range(1, cols):
        img[:, :, (w * c) // cols] = 1.0
    return encode_ppm(img)

"""Multifacet text embedding: naive per-prompt baseline, single-pass path, benchmark.

The single-pass path assembles all facet suffixes behind one shared prefix,
builds the prefix KV cache once, and runs every facet under the decoupled
block mask. Row k of the result matches the naive per-prompt forward to float
noise, and facets cannot see each other at all.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from statistics import median

import numpy as np

from .errors import ConfigError
from .lm import FrozenLM, forward_hidden
from .masks import FacetMask
from .prompts import ConcatLayout, FacetPrompt, PromptSet, assemble_concat, assemble_single


def build_mask(layout: ConcatLayout) -> FacetMask:
    """Span-parameterized facet mask for a concatenated layout."""
    return FacetMask(prefix_end=layout.prefix_end, spans=layout.spans)


@dataclass(frozen=True)
class FacetEmbeddings:
    """One caption's per-facet text embeddings, ordered by prompt position."""

    vectors: np.ndarray  # (K, d_model) float32
    prompt_ids: tuple[int, ...]
    sample_id: int | None = None

    def row(self, k: int) -> np.ndarray:
        return self.vectors[k]


def embed_naive(lm: FrozenLM, caption: str, prompt: FacetPrompt) -> np.ndarray:
    """Baseline: one full causal forward for a single prompt."""
    tokens, extraction = assemble_single(caption, prompt, lm.config.max_seq)
    hidden = forward_hidden(lm, tokens)
    return hidden[extraction]


def embed_multifacet(
    lm: FrozenLM,
    caption: str,
    prompts: PromptSet,
    sample_id: int | None = None,
) -> FacetEmbeddings:
    """All K facet embeddings in one structured pass sharing the prefix cache."""
    layout = assemble_concat(caption, prompts, lm.config.max_seq)
    hidden = forward_hidden(lm, list(layout.tokens), build_mask(layout))
    vectors = np.ascontiguousarray(hidden[list(layout.extraction)])
    return FacetEmbeddings(vectors=vectors, prompt_ids=layout.prompt_ids, sample_id=sample_id)


@dataclass(frozen=True)
class BenchReport:
    k: int
    n_captions: int
    reps: int
    naive_ms: float
    single_pass_ms: float
    speedup: float
    naive_samples_ms: tuple[float, ...]
    single_pass_samples_ms: tuple[float, ...]

    def to_json_lines(self) -> str:
        lines = []
        for i, (n, s) in enumerate(zip(self.naive_samples_ms, self.single_pass_samples_ms)):
            lines.append(json.dumps(
                {"rep": i, "naive_ms": round(n, 3), "single_pass_ms": round(s, 3)}
            ))
        lines.append(json.dumps({
            "summary": True, "k": self.k, "n_captions": self.n_captions,
            "naive_ms": round(self.naive_ms, 3),
            "single_pass_ms": round(self.single_pass_ms, 3),
            "speedup": round(self.speedup, 3),
        }))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        return (
            f"facet embedding benchmark: K={self.k}, {self.n_captions} captions, "
            f"{self.reps} reps (medians)\n"
            f"  naive {self.k}-pass : {self.naive_ms:10.2f} ms\n"
            f"  single pass        : {self.single_pass_ms:10.2f} ms\n"
            f"  speedup            : {self.speedup:10.2f}x\n"
        )


def bench_fda(lm: FrozenLM, captions: list[str], prompts: PromptSet, reps: int = 5) -> BenchReport:
    """Wall-clock medians of naive K-pass vs single-pass embedding."""
    if reps < 3:
        raise ConfigError(f"bench needs reps >= 3, got {reps}")
    naive_ms, single_ms = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        for cap in captions:
            for p in prompts:
                embed_naive(lm, cap, p)
        naive_ms.append((time.perf_counter() - t0) * 1e3)
        t0 = time.perf_counter()
        for cap in captions:
            embed_multifacet(lm, cap, prompts)
        single_ms.append((time.perf_counter() - t0) * 1e3)
    n_med, s_med = median(naive_ms), median(single_ms)
    return BenchReport(
        k=len(prompts),
        n_captions=len(captions),
        reps=reps,
        naive_ms=n_med,
        single_pass_ms=s_med,
        speedup=n_med / s_med,
        naive_samples_ms=tuple(naive_ms),
        single_pass_samples_ms=tuple(single_ms),
    )

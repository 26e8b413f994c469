"""Attention mask specifications: pure causal, and the facet-decoupled block mask.

The facet mask is span-parameterized: it stores the shared-prefix boundary and
the per-facet token spans, never a dense matrix. densify() exists for tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CausalMask:
    """Every position attends to itself and everything before it."""

    def allows(self, query: int, key: int) -> bool:
        return key <= query


@dataclass(frozen=True)
class FacetMask:
    """Block mask over a ⟨prefix, facet_1..facet_K⟩ layout.

    A query inside facet k may attend any prefix key, or a key in facet k at
    or before it. Prefix queries are purely causal. All cross-facet pairs are
    blocked, which is what keeps the facets' embeddings independent.
    """

    prefix_end: int
    spans: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        last = self.prefix_end
        for s, e in self.spans:
            if s != last or e <= s:
                raise ValueError(f"facet spans must tile [{self.prefix_end}, len): got {self.spans}")
            last = e

    @property
    def length(self) -> int:
        return self.spans[-1][1] if self.spans else self.prefix_end

    def facet_of(self, pos: int) -> int | None:
        for k, (s, e) in enumerate(self.spans):
            if s <= pos < e:
                return k
        return None

    def allows(self, query: int, key: int) -> bool:
        if query < self.prefix_end:
            return key <= query
        fq = self.facet_of(query)
        if key < self.prefix_end:
            return True
        fk = self.facet_of(key)
        return fk == fq and key <= query

    def densify(self) -> np.ndarray:
        """Debug/test path: the full boolean (query, key) matrix."""
        n = self.length
        out = np.zeros((n, n), dtype=bool)
        for t in range(n):
            for u in range(n):
                out[t, u] = self.allows(t, u)
        return out


AttentionMaskSpec = CausalMask | FacetMask

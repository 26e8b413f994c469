"""Facet mask structure, naive/single-pass equivalence, leakage freedom, bench."""

import numpy as np
import pytest

from facetclip import facets as F
from facetclip import lm as L
from facetclip import prompts as P
from facetclip.errors import ConfigError
from facetclip.masks import CausalMask, FacetMask


@pytest.fixture(scope="module")
def tiny():
    return L.init_lm(L.PRESETS["tiny"], seed=42)


def _toy_layout():
    # prefix of 4 tokens, then three facets of lengths 3, 2, 4; contents are
    # irrelevant for mask tests except the trailing quotes.
    q = ord('"')
    tokens = [0, 1, 2, 3, 10, 11, q, 20, q, 30, 31, 32, q]
    return P.ConcatLayout(
        tokens=tuple(tokens),
        prefix_end=4,
        spans=((4, 7), (7, 9), (9, 13)),
        extraction=(6, 8, 12),
        prompt_ids=(1, 2, 3),
    )


class TestMaskStructure:
    def test_k1_mask_is_pure_causal(self):
        layout = P.assemble_concat("x", P.PromptSet((P.builtin_prompts()[0],)), 1024)
        mask = F.build_mask(layout)
        n = len(layout.tokens)
        dense = mask.densify()
        causal = np.tril(np.ones((n, n), dtype=bool))
        np.testing.assert_array_equal(dense, causal)

    def test_cross_facet_pairs_blocked(self):
        mask = F.build_mask(_toy_layout())
        for q_pos in range(7, 9):        # facet 2
            for k_pos in range(4, 7):    # facet 1
                assert not mask.allows(q_pos, k_pos)
                assert not mask.allows(k_pos, q_pos)

    def test_densified_mask_matches_hand_rule(self):
        layout = _toy_layout()
        mask = F.build_mask(layout)
        dense = mask.densify()
        prefix_end, spans = layout.prefix_end, layout.spans

        def facet_of(pos):
            for idx, (s, e) in enumerate(spans):
                if s <= pos < e:
                    return idx
            return None

        # brute-force enumeration of the rule, independent of FacetMask internals
        for t in range(len(layout.tokens)):
            for u in range(len(layout.tokens)):
                if t < prefix_end:
                    want = u <= t
                elif u < prefix_end:
                    want = True
                else:
                    want = facet_of(u) == facet_of(t) and u <= t
                assert dense[t, u] == want, (t, u)

    def test_invalid_spans_rejected(self):
        with pytest.raises(ValueError):
            FacetMask(prefix_end=4, spans=((5, 7),))


class TestEmbeddingEquivalence:
    def test_naive_is_deterministic(self, tiny):
        p = P.builtin_prompts()[1]
        a = F.embed_naive(tiny, "a red circle", p)
        b = F.embed_naive(tiny, "a red circle", p)
        assert a.tobytes() == b.tobytes()

    def test_naive_differs_across_prompts(self, tiny):
        ps = P.builtin_prompts()
        a = F.embed_naive(tiny, "a red circle", ps[0])
        b = F.embed_naive(tiny, "a red circle", ps[1])
        assert not np.array_equal(a, b)

    def test_multifacet_rows_match_naive(self, tiny):
        rng = np.random.default_rng(0)
        ps = P.default_prompts()
        for _ in range(5):
            n = int(rng.integers(10, 120))
            caption = "".join(chr(int(rng.integers(32, 127))) for _ in range(n))
            multi = F.embed_multifacet(tiny, caption, ps)
            for k, p in enumerate(ps):
                naive = F.embed_naive(tiny, caption, p)
                assert np.abs(multi.row(k) - naive).max() <= 1e-5

    def test_k1_matches_naive_tightly(self, tiny):
        p = P.builtin_prompts()[4]
        multi = F.embed_multifacet(tiny, "one facet only", P.PromptSet((p,)))
        naive = F.embed_naive(tiny, "one facet only", p)
        assert np.abs(multi.row(0) - naive).max() <= 1e-6

    def test_permuting_prompts_permutes_rows(self, tiny):
        ps = P.default_prompts()
        perm = [3, 0, 5, 1, 6, 2, 4]
        shuffled = P.PromptSet(tuple(ps[i] for i in perm))
        base = F.embed_multifacet(tiny, "permutation check", ps)
        moved = F.embed_multifacet(tiny, "permutation check", shuffled)
        for new_pos, old_pos in enumerate(perm):
            np.testing.assert_array_equal(moved.row(new_pos), base.row(old_pos))
        assert moved.prompt_ids == tuple(ps.ids[i] for i in perm)


class TestLeakageFreedom:
    def test_perturbing_other_facets_leaves_row_bit_identical(self, tiny):
        ps = P.default_prompts()
        layout = P.assemble_concat("leakage probe caption", ps, tiny.config.max_seq)
        mask = F.build_mask(layout)
        base = L.forward_hidden(tiny, list(layout.tokens), mask)
        rng = np.random.default_rng(9)
        for j in range(len(ps)):
            mutated = list(layout.tokens)
            s, e = layout.spans[j]
            for t in range(s, e - 1):  # keep the trailing quote in place
                mutated[t] = int(rng.integers(32, 127))
            out = L.forward_hidden(tiny, mutated, mask)
            for k in range(len(ps)):
                if k == j:
                    continue
                x = layout.extraction[k]
                assert base[x].tobytes() == out[x].tobytes(), (j, k)

    def test_prefix_reuse_soundness(self, tiny):
        ps = P.default_prompts()
        caption = "prefix reuse soundness"
        layout = P.assemble_concat(caption, ps, tiny.config.max_seq)
        multi = F.embed_multifacet(tiny, caption, ps)
        for k in range(len(ps)):
            cache = L.build_kv_cache(tiny, layout.prefix_tokens)
            hidden = L.forward_hidden(tiny, layout.facet_tokens(k), CausalMask(), cache)
            assert np.abs(hidden[-1] - multi.row(k)).max() <= 1e-6


class TestBench:
    def test_reps_precondition(self, tiny):
        with pytest.raises(ConfigError):
            F.bench_fda(tiny, ["a"], P.default_prompts(), reps=2)

    def test_report_arithmetic_consistency(self, tiny):
        rep = F.bench_fda(tiny, ["tiny caption"], P.PromptSet(tuple(P.builtin_prompts())[:2]), reps=3)
        assert rep.speedup == pytest.approx(rep.naive_ms / rep.single_pass_ms)

    def test_k1_speedup_near_one(self, tiny):
        ps = P.PromptSet((P.builtin_prompts()[0],))
        rep = F.bench_fda(tiny, ["same work either way"] * 3, ps, reps=3)
        assert 0.5 <= rep.speedup <= 2.0

    def test_json_lines_shape(self, tiny):
        import json

        rep = F.bench_fda(tiny, ["x"], P.PromptSet((P.builtin_prompts()[0],)), reps=3)
        lines = rep.to_json_lines().strip().splitlines()
        assert len(lines) == 4
        summary = json.loads(lines[-1])
        assert summary["summary"] and "speedup" in summary

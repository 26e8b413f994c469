"""Facet prompt inventory and token-layout assembly.

Every facet prompt shares one scaffold around the caption and differs only in
its suffix. The shared region ends right after the "step by step," comma; each
facet span starts at the following space. The hidden state is read at the
suffix's trailing quote, so every assembly records that extraction index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CapacityError, ConfigError
from .tokenizer import BOS, encode_bytes

PREFIX_HEAD = 'Detailed image description: "'
PREFIX_TAIL = '". After thinking step by step,'
SUFFIX_SEP = " "
SUFFIX_TAIL = ' means in just one word:"'

LEVELS = ("entity", "interaction", "scene")


@dataclass(frozen=True)
class FacetPrompt:
    id: int
    level: str
    suffix_text: str
    default_long: bool = False
    default_short: bool = False

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"unknown facet level {self.level!r}")
        if not self.suffix_text.endswith(':"'):
            raise ConfigError(f"prompt {self.id}: suffix must end with ':\"'")


@dataclass(frozen=True)
class PromptSet:
    prompts: tuple[FacetPrompt, ...]

    def __post_init__(self):
        if len(self.prompts) < 1:
            raise ConfigError("a prompt set needs at least one prompt")
        ids = [p.id for p in self.prompts]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate prompt ids: {ids}")
        if sum(p.default_short for p in self.prompts) > 1:
            raise ConfigError("at most one prompt may be the short-input default")

    def __len__(self) -> int:
        return len(self.prompts)

    def __iter__(self):
        return iter(self.prompts)

    def __getitem__(self, i: int) -> FacetPrompt:
        return self.prompts[i]

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(p.id for p in self.prompts)

    def short_prompt(self) -> FacetPrompt:
        for p in self.prompts:
            if p.default_short:
                return p
        raise ConfigError("prompt set has no short-input default prompt")

    def default_long(self) -> "PromptSet":
        return PromptSet(tuple(p for p in self.prompts if p.default_long))


def _suffix(distinct: str) -> str:
    return distinct + SUFFIX_TAIL


_BUILTIN = (
    FacetPrompt(1, "entity", _suffix("the category of the main object in this image"),
                default_long=True),
    FacetPrompt(2, "entity", _suffix("the prominent characteristic or pattern of the main object in this image"),
                default_long=True),
    FacetPrompt(3, "entity", _suffix("the category of the minor object in this image"),
                default_long=True),
    FacetPrompt(4, "entity", _suffix("the prominent characteristic or pattern of the minor object in this image"),
                default_long=True),
    FacetPrompt(5, "interaction", _suffix("the primary action or event taking place in this image"),
                default_long=True),
    FacetPrompt(6, "interaction", _suffix("the positioning layout or spatial relationship in this image")),
    FacetPrompt(7, "scene", _suffix("this image description"),
                default_long=True, default_short=True),
    FacetPrompt(8, "scene", _suffix("the overall atmosphere or emotion of this image"),
                default_long=True),
    FacetPrompt(9, "scene", _suffix("the dominant color or color combination of this image")),
)


def builtin_prompts() -> PromptSet:
    """The nine built-in facet prompts: 4 entity, 2 interaction, 3 scene."""
    return PromptSet(_BUILTIN)


def default_prompts() -> PromptSet:
    """The seven prompts used by default for long captions."""
    return builtin_prompts().default_long()


@dataclass(frozen=True)
class ConcatLayout:
    """Token layout of ⟨prefix, facet_1..facet_K⟩ plus extraction bookkeeping."""

    tokens: tuple[int, ...]
    prefix_end: int
    spans: tuple[tuple[int, int], ...]
    extraction: tuple[int, ...]
    prompt_ids: tuple[int, ...]
    caption_truncated: bool = field(default=False, compare=False)

    def __post_init__(self):
        pos = self.prefix_end
        for (s, e), x in zip(self.spans, self.extraction):
            if s != pos or e <= s:
                raise ConfigError(f"facet spans must partition [{self.prefix_end}, len)")
            if x != e - 1 or self.tokens[x] != ord('"'):
                raise ConfigError(f"extraction index {x} does not sit on a trailing quote")
            pos = e
        if pos != len(self.tokens):
            raise ConfigError("facet spans do not cover the whole suffix region")

    @property
    def prefix_tokens(self) -> list[int]:
        return list(self.tokens[: self.prefix_end])

    def facet_tokens(self, k: int) -> list[int]:
        s, e = self.spans[k]
        return list(self.tokens[s:e])


def _fit_caption(caption: str, overhead: int, max_seq: int) -> tuple[bytes, bool]:
    cap = caption.encode("utf-8")
    budget = max_seq - overhead
    if budget < 0:
        raise CapacityError(
            f"prompt scaffold needs {overhead} tokens, exceeding max_seq {max_seq}"
        )
    if len(cap) <= budget:
        return cap, False
    warnings.warn(
        f"caption of {len(cap)} bytes truncated to {budget} to fit max_seq {max_seq}",
        stacklevel=3,
    )
    return cap[:budget], True


def assemble_single(caption: str, prompt: FacetPrompt, max_seq: int) -> tuple[list[int], int]:
    """Token sequence for one facet prompt, and the index of its trailing quote."""
    scaffold = len(encode_bytes(PREFIX_HEAD + PREFIX_TAIL + SUFFIX_SEP + prompt.suffix_text)) + 1
    cap, _ = _fit_caption(caption, scaffold, max_seq)
    text_tokens = (
        encode_bytes(PREFIX_HEAD) + list(cap)
        + encode_bytes(PREFIX_TAIL + SUFFIX_SEP + prompt.suffix_text)
    )
    tokens = [BOS] + text_tokens
    return tokens, len(tokens) - 1


def assemble_concat(caption: str, prompts: PromptSet, max_seq: int) -> ConcatLayout:
    """Single structured sequence ⟨prefix(caption), facet suffixes⟩.

    The prefix is BOS plus the caption scaffold through "step by step,"; each
    facet span is the space plus that prompt's suffix. With K=1 the layout's
    tokens equal assemble_single's output exactly.
    """
    suffix_lens = [len(encode_bytes(SUFFIX_SEP + p.suffix_text)) for p in prompts]
    overhead = 1 + len(encode_bytes(PREFIX_HEAD + PREFIX_TAIL)) + sum(suffix_lens)
    cap, truncated = _fit_caption(caption, overhead, max_seq)

    prefix = [BOS] + encode_bytes(PREFIX_HEAD) + list(cap) + encode_bytes(PREFIX_TAIL)
    tokens = list(prefix)
    spans = []
    extraction = []
    for p in prompts:
        start = len(tokens)
        tokens.extend(encode_bytes(SUFFIX_SEP + p.suffix_text))
        spans.append((start, len(tokens)))
        extraction.append(len(tokens) - 1)
    return ConcatLayout(
        tokens=tuple(tokens),
        prefix_end=len(prefix),
        spans=tuple(spans),
        extraction=tuple(extraction),
        prompt_ids=prompts.ids,
        caption_truncated=truncated,
    )


# ---------------------------------------------------------------------------
# Prompt file format: one prompt per line, tab-separated
#   level \t flags \t suffix-text
# flags: comma list from {long, short}, or "-" for none. '#' starts a comment.
# ---------------------------------------------------------------------------


def load_prompts(path: str | Path) -> PromptSet:
    prompts = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError(f"{path}:{lineno}: expected level<TAB>flags<TAB>suffix")
        level, flags_s, suffix = parts
        flags = set() if flags_s.strip() == "-" else {f.strip() for f in flags_s.split(",")}
        unknown = flags - {"long", "short"}
        if unknown:
            raise ConfigError(f"{path}:{lineno}: unknown flags {sorted(unknown)}")
        prompts.append(
            FacetPrompt(
                id=len(prompts) + 1,
                level=level.strip(),
                suffix_text=suffix,
                default_long="long" in flags,
                default_short="short" in flags,
            )
        )
    return PromptSet(tuple(prompts))


def save_prompts(prompts: PromptSet, path: str | Path) -> None:
    lines = []
    for p in prompts:
        flags = [name for name, on in (("long", p.default_long), ("short", p.default_short)) if on]
        lines.append(f"{p.level}\t{','.join(flags) or '-'}\t{p.suffix_text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

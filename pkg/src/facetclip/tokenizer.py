"""Byte-level tokenizer: 256 raw-byte tokens plus BOS and PAD specials.

Total over all UTF-8 input; detokenize(tokenize(s)) == s for every string.
"""

from __future__ import annotations

from typing import Iterable, Sequence

BYTE_TOKENS = 256
BOS = 256
PAD = 257
N_SPECIALS = 2


def encode_bytes(text: str) -> list[int]:
    """UTF-8 bytes of `text` as token ids, no specials."""
    return list(text.encode("utf-8"))


def tokenize(text: str) -> list[int]:
    """BOS followed by the UTF-8 bytes of `text`."""
    return [BOS] + encode_bytes(text)


def detokenize(tokens: Iterable[int]) -> str:
    """Inverse of tokenize on valid UTF-8; specials are dropped, and byte
    sequences that are not valid UTF-8 decode with replacement characters."""
    raw = bytes(t for t in tokens if 0 <= t < BYTE_TOKENS)
    return raw.decode("utf-8", errors="replace")


def token_str(token: int) -> str:
    """Printable form of a single token, for vocabulary-map output."""
    if token == BOS:
        return "<bos>"
    if token == PAD:
        return "<pad>"
    if 0 <= token < BYTE_TOKENS:
        return bytes([token]).decode("utf-8", errors="replace")
    return f"<unk:{token}>"


def is_quote(token: int) -> bool:
    return token == ord('"')


def validate(tokens: Sequence[int], vocab_size: int) -> None:
    for t in tokens:
        if not 0 <= t < vocab_size:
            raise ValueError(f"token id {t} outside vocab of size {vocab_size}")

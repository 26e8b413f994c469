"""Image ingestion: binary PPM (P6) decode, bilinear resize, normalization.

PPM keeps ingestion dependency-free and bit-exact. Other formats are expected
to be converted to PPM beforehand (see the CLI docs).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

NORM_MEAN = 0.5
NORM_STD = 0.5


def decode_ppm(data: bytes) -> np.ndarray:
    """P6 bytes -> float32 (3, H, W) in [0, 1]."""
    if not data.startswith(b"P6"):
        raise FormatError("not a binary PPM (P6) file")
    # header: magic, width, height, maxval; '#' comments allowed between fields
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError as e:
            raise FormatError(f"bad PPM header field {data[start:pos]!r}") from e
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"only maxval 255 PPM supported, got {maxval}")
    need = width * height * 3
    raw = data[pos : pos + need]
    if len(raw) != need:
        raise FormatError(f"PPM payload has {len(raw)} bytes, expected {need}")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return (img.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)


def encode_ppm(img: np.ndarray) -> bytes:
    """float32 (3, H, W) in [0, 1] -> P6 bytes."""
    arr = np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    c, h, w = arr.shape
    body = (arr.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8).tobytes()
    return f"P6\n{w} {h}\n255\n".encode() + body


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-convention bilinear resample of (C, H, W)."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None]
    wx = (xs - x0).astype(np.float32)[None, :]
    out = np.empty((c, out_h, out_w), dtype=np.float32)
    for ch in range(c):
        plane = img[ch]
        top = plane[np.ix_(y0, x0)] * (1 - wx) + plane[np.ix_(y0, x1)] * wx
        bot = plane[np.ix_(y1, x0)] * (1 - wx) + plane[np.ix_(y1, x1)] * wx
        out[ch] = top * (1 - wy) + bot * wy
    return out


def preprocess(raw: bytes, image_size: int) -> np.ndarray:
    """Decode, squash-resize to image_size^2, and normalize channels.

    Output is (3, image_size, image_size) float32, (x - mean) / std.
    """
    img = decode_ppm(raw)
    img = bilinear_resize(img, image_size, image_size)
    return (img - np.float32(NORM_MEAN)) / np.float32(NORM_STD)


def preprocess_file(path: str | Path, image_size: int) -> np.ndarray:
    return preprocess(Path(path).read_bytes(), image_size)

"""FLMW: the package's binary container for named float32 tensors.

Layout, all little-endian:

    magic   4 bytes  b"FLMW"
    version u32      1
    count   u32      number of tensors
    entries count x { name_len u16, name utf-8, rank u8, dims u64 x rank,
                      offset u64 (bytes into payload) }
    checksum u64     FNV-1a over the payload bytes
    payload          contiguous float32 data, entry order

Writes are deterministic functions of the tensor dict, so identical inputs
produce byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, MagicError, VersionError

MAGIC = b"FLMW"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return h


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays; insertion order of the dict is preserved."""
    names = list(tensors.keys())
    payload_parts = []
    entries = []
    offset = 0
    for name in names:
        arr = np.asarray(tensors[name], dtype=np.float32)
        raw = arr.astype("<f4", copy=False).tobytes()
        entries.append((name, arr.shape, offset))
        payload_parts.append(raw)
        offset += len(raw)
    payload = b"".join(payload_parts)

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(names))
    for name, shape, off in entries:
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<B", len(shape))
        for d in shape:
            buf += struct.pack("<Q", d)
        buf += struct.pack("<Q", off)
    buf += struct.pack("<Q", fnv1a64(payload))
    buf += payload
    Path(path).write_bytes(bytes(buf))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container back; raises distinct errors for each corruption mode."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: file too short for a header")
    if data[:4] != MAGIC:
        raise MagicError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    pos = 12
    entries = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", data, pos) if rank else ()
            pos += 8 * rank
            (off,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            entries.append((name, tuple(int(d) for d in dims), off))
        (stored_sum,) = struct.unpack_from("<Q", data, pos)
        pos += 8
    except struct.error as e:
        raise FormatError(f"{path}: truncated header ({e})") from e
    payload = data[pos:]

    expected_len = sum(int(np.prod(shape, dtype=np.int64)) * 4 for _, shape, _ in entries)
    if len(payload) != expected_len:
        raise ChecksumError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected_len}"
        )
    if fnv1a64(payload) != stored_sum:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    out: dict[str, np.ndarray] = {}
    for name, shape, off in entries:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off)
        out[name] = arr.reshape(shape).astype(np.float32)
    return out

"""Offline per-sample, per-facet text embeddings: FLME shards and corpus I/O.

Precomputing embeddings once removes every LM forward pass from the training
loop. Shard bytes are a deterministic function of (corpus, weights, prompts).

FLME layout, little-endian:

    magic "FLME", u32 version=1, u32 d_t, u32 K, u64 n_samples,
    sample ids n x u64 (strictly increasing),
    payload n x K x d_t f32,
    trailer u64 FNV-1a checksum over everything before it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CapacityError,
    ChecksumError,
    ConfigError,
    FormatError,
    MagicError,
    NotFoundError,
    VersionError,
)
from .facets import embed_multifacet
from .flmw import fnv1a64
from .lm import FrozenLM
from .prompts import PromptSet

MAGIC = b"FLME"
VERSION = 1
DEFAULT_SHARD_SIZE = 4096


@dataclass(frozen=True)
class CorpusRecord:
    sample_id: int
    caption: str
    image_path: str


@dataclass(frozen=True)
class Corpus:
    records: tuple[CorpusRecord, ...]

    def __post_init__(self):
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ConfigError("corpus sample ids must be unique")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self, sample_id: int) -> CorpusRecord:
        for r in self.records:
            if r.sample_id == sample_id:
                return r
        raise NotFoundError(f"sample id {sample_id} not in corpus")

    def sorted_by_id(self) -> "Corpus":
        return Corpus(tuple(sorted(self.records, key=lambda r: r.sample_id)))


def load_corpus(path: str | Path) -> Corpus:
    """JSON-lines corpus: one {"id", "caption", "image"} object per line.

    Relative image paths resolve against the corpus file's directory, so a
    dataset directory can be moved or compared byte-for-byte across locations.
    """
    base = Path(path).parent
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({e})") from e
        try:
            img = Path(str(obj["image"]))
            if not img.is_absolute():
                img = base / img
            records.append(
                CorpusRecord(sample_id=int(obj["id"]), caption=str(obj["caption"]),
                             image_path=str(img))
            )
        except KeyError as e:
            raise FormatError(f"{path}:{lineno}: missing corpus key {e}") from e
    return Corpus(tuple(records))


def save_corpus(corpus: Corpus, path: str | Path, relative_to: str | Path | None = None) -> None:
    """Write JSONL; with relative_to, image paths are stored relative to it."""
    lines = []
    for r in corpus:
        img = r.image_path
        if relative_to is not None:
            img = str(Path(img).resolve().relative_to(Path(relative_to).resolve()))
        lines.append(json.dumps({"id": r.sample_id, "caption": r.caption, "image": img}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Shard files
# ---------------------------------------------------------------------------


def write_shard(path: str | Path, sample_ids: np.ndarray, embeddings: np.ndarray) -> None:
    """embeddings: (n, K, d_t) float32; sample_ids: (n,) strictly increasing."""
    ids = np.asarray(sample_ids, dtype=np.uint64)
    emb = np.ascontiguousarray(embeddings, dtype=np.float32)
    n, k, d = emb.shape
    if ids.shape != (n,):
        raise ConfigError(f"{n} embedding rows but {ids.shape} ids")
    if n > 1 and not (ids[1:] > ids[:-1]).all():
        raise ConfigError("shard sample ids must be strictly increasing")
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<III", VERSION, d, k)
    buf += struct.pack("<Q", n)
    buf += ids.astype("<u8").tobytes()
    buf += emb.astype("<f4").tobytes()
    buf += struct.pack("<Q", fnv1a64(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


@dataclass(frozen=True)
class ShardTable:
    """One shard, fully in memory, binary-searchable by sample id."""

    sample_ids: np.ndarray  # (n,) int64, strictly increasing
    embeddings: np.ndarray  # (n, K, d_t) float32

    @property
    def d_t(self) -> int:
        return self.embeddings.shape[2]

    @property
    def k(self) -> int:
        return self.embeddings.shape[1]


def read_shard(path: str | Path) -> ShardTable:
    data = Path(path).read_bytes()
    if len(data) < 32:
        raise FormatError(f"{path}: file too short for a shard header")
    if data[:4] != MAGIC:
        raise MagicError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, d, k = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported shard version {version}")
    (n,) = struct.unpack_from("<Q", data, 16)
    ids_end = 24 + 8 * n
    payload_end = ids_end + n * k * d * 4
    if len(data) != payload_end + 8:
        raise ChecksumError(
            f"{path}: file is {len(data)} bytes, header declares {payload_end + 8}"
        )
    (stored,) = struct.unpack_from("<Q", data, payload_end)
    if fnv1a64(data[:payload_end]) != stored:
        raise ChecksumError(f"{path}: shard checksum mismatch")
    ids = np.frombuffer(data, dtype="<u8", count=n, offset=24).astype(np.int64)
    emb = np.frombuffer(data, dtype="<f4", count=n * k * d, offset=ids_end)
    return ShardTable(sample_ids=ids, embeddings=emb.reshape(n, k, d).astype(np.float32))


class EmbeddingStore:
    """A set of shards presented as one id -> (K, d_t) table."""

    def __init__(self, tables: list[ShardTable]):
        if not tables:
            raise ConfigError("store needs at least one shard")
        ks = {t.k for t in tables}
        ds = {t.d_t for t in tables}
        if len(ks) != 1 or len(ds) != 1:
            raise FormatError(f"shards disagree on K ({ks}) or d_t ({ds})")
        self.tables = sorted(tables, key=lambda t: int(t.sample_ids[0]) if len(t.sample_ids) else -1)
        self.k = ks.pop()
        self.d_t = ds.pop()

    def _locate(self, sample_id: int) -> tuple[ShardTable, int]:
        for t in self.tables:
            idx = int(np.searchsorted(t.sample_ids, sample_id))
            if idx < len(t.sample_ids) and int(t.sample_ids[idx]) == sample_id:
                return t, idx
        raise NotFoundError(f"sample id {sample_id} not in store")

    def lookup(self, sample_id: int, facet: int) -> np.ndarray:
        t, idx = self._locate(sample_id)
        if not 0 <= facet < self.k:
            raise ConfigError(f"facet {facet} out of range for K={self.k}")
        return t.embeddings[idx, facet]

    def lookup_all(self, sample_id: int) -> np.ndarray:
        t, idx = self._locate(sample_id)
        return t.embeddings[idx]

    def batch(self, sample_ids) -> np.ndarray:
        """(N, K, d_t) block for a batch of ids, raising on the first missing one."""
        return np.stack([self.lookup_all(int(s)) for s in sample_ids])


def open_store(paths) -> EmbeddingStore:
    return EmbeddingStore([read_shard(p) for p in paths])


def open_store_dir(directory: str | Path) -> EmbeddingStore:
    paths = sorted(Path(directory).glob("*.flme"))
    if not paths:
        raise NotFoundError(f"no .flme shards in {directory}")
    return open_store(paths)


def precompute(
    corpus: Corpus,
    lm: FrozenLM,
    prompts: PromptSet,
    shard_size: int = DEFAULT_SHARD_SIZE,
    out_dir: str | Path = ".",
) -> list[Path]:
    """Embed every caption once and write ordered shards; fully deterministic."""
    if len(corpus) == 0:
        raise ConfigError("precompute needs a nonempty corpus")
    if shard_size < 1:
        raise ConfigError(f"shard_size must be >= 1, got {shard_size}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(corpus.sorted_by_id())
    paths = []
    for shard_idx, start in enumerate(range(0, len(records), shard_size)):
        chunk = records[start:start + shard_size]
        rows = []
        for rec in chunk:
            try:
                emb = embed_multifacet(lm, rec.caption, prompts, sample_id=rec.sample_id)
            except CapacityError as e:
                raise CapacityError(f"sample {rec.sample_id}: {e}") from e
            rows.append(emb.vectors)
        ids = np.array([r.sample_id for r in chunk], dtype=np.uint64)
        path = out_dir / f"embeddings-{shard_idx:05d}.flme"
        write_shard(path, ids, np.stack(rows))
        paths.append(path)
    return paths

"""Embedding sets on disk (KEMB v1), row-aligned pairing, and pair sampling.

KEMB v1 layout (little-endian):
    bytes 0-3    magic "KEMB"
    bytes 4-7    version, u32 = 1
    byte  8      dtype code, u8: 1 = float32, 2 = float64
    bytes 9-16   n, u64
    bytes 17-24  d, u64
    payload      n*d values, row-major
    sections     repeated [tag u8][length u64][bytes]:
                   tag 1: labels, n signed 64-bit ints
                   tag 2: ids, n entries of [u32 length][UTF-8 bytes]
                   tag 3: meta, UTF-8 JSON object
                 unknown tags are skipped
    trailer      u32 CRC32 over the payload section only
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"KEMB"
VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_KIND = {"f4": 1, "f8": 2}


class StoreError(ValueError):
    """Malformed file, invalid set, or pairing mismatch."""


@dataclass
class EmbeddingSet:
    """An n x d block of embeddings plus optional row labels/ids.

    Args:
        data: n x d float array; validated finite on construction.
        labels: optional integer label per row.
        ids: optional UTF-8 string id per row.
        meta: free-form string-to-string map (encoder name, provenance).
    """

    data: np.ndarray
    labels: np.ndarray | None = None
    ids: list[str] | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise StoreError(f"data must be n x d with n,d >= 1, got shape {self.data.shape}")
        bad = ~np.isfinite(self.data)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise StoreError(f"non-finite value at row {r}, col {c}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != self.n:
                raise StoreError(f"labels length {len(self.labels)} != n {self.n}")
        if self.ids is not None and len(self.ids) != self.n:
            raise StoreError(f"ids length {len(self.ids)} != n {self.n}")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass
class PairedEmbeddings:
    """Row-aligned (source, target) sets over the same underlying items."""

    source: EmbeddingSet
    target: EmbeddingSet

    def __post_init__(self) -> None:
        if self.source.n != self.target.n:
            raise StoreError(f"row-count mismatch: source n={self.source.n}, "
                             f"target n={self.target.n}")

    @property
    def n(self) -> int:
        return self.source.n


@dataclass
class PairBatch:
    """Sampled index pairs (i, j), i != j, for one stochastic step."""

    pairs: np.ndarray  # (batch_size, 2) int64
    batch_size: int

    def __post_init__(self) -> None:
        self.pairs = np.asarray(self.pairs, dtype=np.int64)
        if self.pairs.shape != (self.batch_size, 2):
            raise StoreError(f"pairs shape {self.pairs.shape} != "
                             f"({self.batch_size}, 2)")
        if (self.pairs[:, 0] == self.pairs[:, 1]).any():
            bad = int(np.argmax(self.pairs[:, 0] == self.pairs[:, 1]))
            raise StoreError(f"pair {bad} has i == j")


def save(eset: EmbeddingSet, path: str | Path) -> None:
    """Write an EmbeddingSet in KEMB v1, byte-reproducibly.

    The payload keeps the array's own precision (f4 or f8); anything
    else is rejected rather than silently cast.
    """
    kind = eset.data.dtype.str.lstrip("<>=|")
    if kind not in _CODE_FOR_KIND:
        raise StoreError(f"unsupported dtype {eset.data.dtype}; use float32 or float64")
    code = _CODE_FOR_KIND[kind]
    payload = np.ascontiguousarray(eset.data, dtype=_DTYPE_CODES[code]).tobytes()

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<B", code)
    blob += struct.pack("<QQ", eset.n, eset.d)
    blob += payload
    if eset.labels is not None:
        raw = eset.labels.astype("<i8").tobytes()
        blob += struct.pack("<BQ", 1, len(raw))
        blob += raw
    if eset.ids is not None:
        raw = bytearray()
        for s in eset.ids:
            enc = s.encode("utf-8")
            raw += struct.pack("<I", len(enc))
            raw += enc
        blob += struct.pack("<BQ", 2, len(raw))
        blob += raw
    if eset.meta:
        raw = json.dumps(eset.meta, sort_keys=True).encode("utf-8")
        blob += struct.pack("<BQ", 3, len(raw))
        blob += raw
    blob += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


def load(path: str | Path) -> EmbeddingSet:
    """Read a KEMB v1 file; errors name the offending layer distinctly."""
    buf = Path(path).read_bytes()
    if len(buf) < 25 or buf[:4] != MAGIC:
        raise StoreError(f"bad magic in {path}: expected KEMB")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version > VERSION:
        raise StoreError(f"unsupported KEMB version {version} (max {VERSION})")
    (code,) = struct.unpack_from("<B", buf, 8)
    if code not in _DTYPE_CODES:
        raise StoreError(f"unknown dtype code {code}")
    n, d = struct.unpack_from("<QQ", buf, 9)
    itemsize = _DTYPE_CODES[code].itemsize
    off = 25
    nbytes = n * d * itemsize
    if len(buf) < off + nbytes + 4:
        raise StoreError(f"truncated payload: need {nbytes} bytes, file too short")
    payload = buf[off : off + nbytes]
    off += nbytes

    labels: np.ndarray | None = None
    ids: list[str] | None = None
    meta: dict[str, str] = {}
    # trailer is 4 bytes; anything longer than that is another section
    while len(buf) - off > 4:
        tag, length = struct.unpack_from("<BQ", buf, off)
        off += 9
        if len(buf) - off < length + 4:
            raise StoreError(f"truncated section tag {tag}")
        body = buf[off : off + length]
        off += length
        if tag == 1:
            labels = np.frombuffer(body, dtype="<i8").copy()
        elif tag == 2:
            ids = []
            p = 0
            while p < len(body):
                (slen,) = struct.unpack_from("<I", body, p)
                p += 4
                ids.append(body[p : p + slen].decode("utf-8"))
                p += slen
        elif tag == 3:
            meta = json.loads(body.decode("utf-8"))
        # unknown tags: skipped

    (crc_stored,) = struct.unpack_from("<I", buf, off)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise StoreError(f"CRC mismatch in {path}: payload corrupted")

    # widen to the toolkit's 64-bit working precision (exact for f4)
    data = np.frombuffer(payload, dtype=_DTYPE_CODES[code]).reshape(n, d)
    return EmbeddingSet(data=data.astype(np.float64), labels=labels, ids=ids, meta=meta)


def pair(source: EmbeddingSet, target: EmbeddingSet) -> PairedEmbeddings:
    """Row-align two sets; ids, when both sides carry them, must agree."""
    if source.n != target.n:
        raise StoreError(f"row-count mismatch: source n={source.n}, target n={target.n}")
    if source.ids is not None and target.ids is not None:
        for i, (a, b) in enumerate(zip(source.ids, target.ids)):
            if a != b:
                raise StoreError(f"id mismatch at index {i}: {a!r} vs {b!r}")
    return PairedEmbeddings(source=source, target=target)


def sample_pair_batch(
    paired: PairedEmbeddings, batch_size: int, rng: np.random.Generator
) -> PairBatch:
    """Draw batch_size index pairs for one stochastic step.

    When 2*batch_size <= n: a fresh shuffle is cut into disjoint
    consecutive pairs, keeping the sample-wise terms independent.
    Otherwise pairs are drawn i.i.d. uniformly with i != j.
    """
    n = paired.n
    if n < 2:
        raise StoreError("need at least 2 rows to form a pair")
    if batch_size < 1:
        raise StoreError("batch_size must be >= 1")
    if 2 * batch_size <= n:
        idx = rng.permutation(n)[: 2 * batch_size]
        pairs = idx.reshape(batch_size, 2)
    else:
        ia = rng.integers(0, n, size=batch_size)
        ib = rng.integers(0, n, size=batch_size)
        bad = ia == ib
        while bad.any():
            ib[bad] = rng.integers(0, n, size=int(bad.sum()))
            bad = ia == ib
        pairs = np.stack([ia, ib], axis=1)
    return PairBatch(pairs=pairs.astype(np.int64), batch_size=batch_size)

"""Bit-exact embedding cache files.

Layout (all integers little-endian):

    header:  magic "EBCN" | u16 version = 1 | u8 dtype code (1 = binary16)
             | u32 dim | u64 record count
    record:  u16 id length | id UTF-8
             | u8 label (0 coherent, 1 corrupted, 2 unlabeled)
             | u16 pair-id length | pair id UTF-8 (empty allowed)
             | u16 kind-tag length | kind tag UTF-8
             | u32 position count
             | positions x dim float16 values, row-major
    footer:  u64 FNV-1a checksum of all record bytes

Payload values are stored in IEEE-754 binary16 with round-to-nearest-even;
reading yields float32 by default (binary16 is exactly representable), so a
write -> read -> write cycle is byte-identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .binio import ByteReader, fnv1a64, pack_u8, pack_u16, pack_u32, pack_u64
from .corruption import IDENTITY_TOL, ContrastivePair, diff_positions
from .errors import DataError
from .sequences import (
    LABEL_COHERENT,
    LABEL_CORRUPTED,
    EmbeddingSequence,
)

logger = logging.getLogger(__name__)

MAGIC = b"EBCN"
VERSION = 1
DTYPE_BINARY16 = 1

_LABELS = (0, 1, 2)


def _encode_str(s: str, what: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError(f"{what} longer than 65535 bytes")
    return pack_u16(len(raw)) + raw


def write_cache(records: Sequence[EmbeddingSequence], path) -> None:
    """Serialize sequences to a cache file, converting values to binary16
    with round-to-nearest-even. All records must share one dim."""
    records = list(records)
    if not records:
        raise DataError("refusing to write an empty cache")
    dim = records[0].dim
    body = bytearray()
    for rec in records:
        if rec.dim != dim:
            raise DataError(
                f"record {rec.id!r} has dim {rec.dim}, cache dim is {dim}"
            )
        if rec.label not in _LABELS:
            raise DataError(f"record {rec.id!r} has invalid label {rec.label}")
        if not np.all(np.isfinite(rec.data)):
            raise DataError(f"record {rec.id!r} contains non-finite values")
        body += _encode_str(rec.id, "record id")
        body += pack_u8(rec.label)
        body += _encode_str(rec.pair_id, "pair id")
        body += _encode_str(rec.kind, "kind tag")
        body += pack_u32(rec.positions)
        body += np.ascontiguousarray(rec.data.astype("<f2")).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(pack_u16(VERSION))
        fh.write(pack_u8(DTYPE_BINARY16))
        fh.write(pack_u32(dim))
        fh.write(pack_u64(len(records)))
        fh.write(body)
        fh.write(pack_u64(fnv1a64(bytes(body))))


def read_cache(path, dtype=np.float32) -> list[EmbeddingSequence]:
    """Read and verify a cache file. The stored binary16 payload upcasts
    exactly to ``dtype`` (float32 by default)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    ctx = f"cache {path}"
    r = ByteReader(blob, ctx)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DataError(f"{ctx}: magic: expected {MAGIC!r}, got {magic!r}")
    version = r.u16("version")
    if version != VERSION:
        raise DataError(f"{ctx}: version: expected {VERSION}, got {version}")
    dtype_code = r.u8("dtype code")
    if dtype_code != DTYPE_BINARY16:
        raise DataError(f"{ctx}: dtype: expected code {DTYPE_BINARY16} (binary16), got {dtype_code}")
    dim = r.u32("dim")
    count = r.u64("record count")

    body_start = r.offset
    records: list[EmbeddingSequence] = []
    for _ in range(count):
        rec_id = r.take(r.u16("id length"), "record id").decode("utf-8")
        label = r.u8("label")
        if label not in _LABELS:
            raise DataError(f"{ctx}: record {rec_id!r}: invalid label {label}")
        pair_id = r.take(r.u16("pair-id length"), "pair id").decode("utf-8")
        kind = r.take(r.u16("kind length"), "kind tag").decode("utf-8")
        positions = r.u32("position count")
        payload = r.take(2 * positions * dim, "payload")
        data = np.frombuffer(payload, dtype="<f2").reshape(positions, dim).astype(dtype)
        records.append(
            EmbeddingSequence(data, id=rec_id, label=label, pair_id=pair_id, kind=kind)
        )
    body_end = r.offset
    stated = r.u64("checksum")
    actual = fnv1a64(blob[body_start:body_end])
    if stated != actual:
        raise DataError(
            f"{ctx}: checksum mismatch: footer says {stated:#018x}, records hash to {actual:#018x}"
        )
    if r.remaining():
        raise DataError(f"{ctx}: {r.remaining()} trailing bytes after checksum")
    return records


# ---------------------------------------------------------------------------
# inspection
# ---------------------------------------------------------------------------


@dataclass
class CacheInfo:
    path: str
    version: int
    dtype_code: int
    dim: int
    record_count: int
    kind_counts: dict[str, int]
    label_counts: dict[int, int]
    records: list[tuple[str, int, str, str, int]]  # id, label, pair_id, kind, positions

    def render(self, max_rows: int = 20) -> str:
        lines = [
            f"cache file    {self.path}",
            f"version       {self.version}",
            f"dtype         binary16 (code {self.dtype_code})",
            f"dim           {self.dim}",
            f"records       {self.record_count}",
            "labels        "
            + ", ".join(f"{label}:{n}" for label, n in sorted(self.label_counts.items())),
            "",
            f"{'id':<24} {'label':>5} {'pair_id':<24} {'kind':<12} {'positions':>9}",
        ]
        for rec_id, label, pair_id, kind, positions in self.records[:max_rows]:
            lines.append(f"{rec_id:<24} {label:>5} {pair_id:<24} {kind:<12} {positions:>9}")
        if self.record_count > max_rows:
            lines.append(f"... {self.record_count - max_rows} more records")
        lines.append("")
        lines.append("per-kind counts:")
        for kind, n in sorted(self.kind_counts.items()):
            lines.append(f"  {kind or '(none)':<14} {n}")
        return "\n".join(lines) + "\n"


def inspect_cache(path) -> CacheInfo:
    records = read_cache(path)
    kind_counts: dict[str, int] = {}
    label_counts: dict[int, int] = {}
    rows = []
    for rec in records:
        kind_counts[rec.kind] = kind_counts.get(rec.kind, 0) + 1
        label_counts[rec.label] = label_counts.get(rec.label, 0) + 1
        rows.append((rec.id, rec.label, rec.pair_id, rec.kind, rec.positions))
    first = records[0]
    return CacheInfo(
        path=str(path),
        version=VERSION,
        dtype_code=DTYPE_BINARY16,
        dim=first.dim,
        record_count=len(records),
        kind_counts=kind_counts,
        label_counts=label_counts,
        records=rows,
    )


# ---------------------------------------------------------------------------
# paired ingestion
# ---------------------------------------------------------------------------


@dataclass
class PairedDataset:
    """Contrastive pairs assembled from cache records: positive = label 0,
    negative = the label-1 record whose pair id names it."""

    pairs: list[ContrastivePair]
    dropped: list[str] = field(default_factory=list)

    @property
    def kinds(self) -> list[str]:
        return sorted({p.kind for p in self.pairs})

    def __len__(self) -> int:
        return len(self.pairs)


def pair_records(records: Iterable[EmbeddingSequence]) -> PairedDataset:
    """Match corrupted records to their originals by pair id; validity and
    corrupted positions are recomputed from the payloads, never trusted."""
    positives = {}
    for rec in records:
        if rec.label == LABEL_COHERENT and rec.id:
            positives[rec.id] = rec
    pairs: list[ContrastivePair] = []
    dropped: list[str] = []
    for rec in records:
        if rec.label != LABEL_CORRUPTED or not rec.pair_id:
            continue
        partner = positives.get(rec.pair_id)
        if partner is None:
            dropped.append(rec.id)
            logger.warning("corrupted record %r has no label-0 partner %r; dropped", rec.id, rec.pair_id)
            continue
        if partner.data.shape != rec.data.shape:
            raise DataError(
                f"pair {rec.pair_id!r}: shapes differ ({partner.data.shape} vs {rec.data.shape})"
            )
        changed = diff_positions(partner.data, rec.data)
        valid = bool(np.any(np.abs(rec.data - partner.data) > IDENTITY_TOL))
        pairs.append(
            ContrastivePair(partner, rec, rec.kind, valid, changed if valid else ())
        )
    if not pairs:
        raise DataError("dataset has no pairs")
    return PairedDataset(pairs, dropped)


def ingest_paired(path) -> PairedDataset:
    return pair_records(read_cache(path))


def pairs_to_records(pairs: Sequence[ContrastivePair]) -> list[EmbeddingSequence]:
    """Flatten pairs into records ready for ``write_cache``: each positive
    once (by id), then every negative pointing back at it."""
    records: list[EmbeddingSequence] = []
    seen: set[str] = set()
    for pair in pairs:
        if pair.positive.id not in seen:
            seen.add(pair.positive.id)
            records.append(pair.positive)
        records.append(pair.negative)
    return records

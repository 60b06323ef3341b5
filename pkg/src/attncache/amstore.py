"""Append-only attention-map database with memory-mapped, zero-copy reads.

File layout (all integers little-endian, floats IEEE-754 binary32)::

    header   32 bytes   magic "ACAM", version u32, num_layers u32, num_heads u32,
                        dtype u32 (0 = f32), record count u64, 4 zero bytes
    blobs               per record, layer 0..n-1 back to back; a layer blob is
                        heads x L x L floats, head-major, row-major within a head
    footer              per record: id u64, seq_len u32, 4 zero bytes, then
                        num_layers x (offset u64, length u64)
    trailer  12 bytes   footer offset u64, magic "ACAM"

Because a record's layers are contiguous, `get_maps` returns one
``(layers, heads, L, L)`` array that aliases the mapped file.
"""

from __future__ import annotations

import mmap
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NotFoundError
from .model import AttentionRecord

STORE_MAGIC = b"ACAM"
STORE_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIIIQ4x")
_ENTRY_HEAD = struct.Struct("<QI4x")
_SEGMENT = struct.Struct("<QQ")
_TRAILER = struct.Struct("<Q4s")


class StoreError(ValueError):
    pass


class StoreClosedError(StoreError):
    pass


@dataclass(frozen=True)
class RecordDirectoryEntry:
    record_id: int
    seq_len: int
    offsets: tuple[int, ...]
    lengths: tuple[int, ...]

    @property
    def start(self) -> int:
        return self.offsets[0]

    @property
    def end(self) -> int:
        return self.offsets[-1] + self.lengths[-1]


class MappedAttnView:
    """Read-only view of one record's maps, backed by the store's mapping.

    Indexing by layer yields a ``(heads, L, L)`` array.  Using the view after
    the store is closed raises `StoreClosedError`.
    """

    __slots__ = ("record_id", "seq_len", "_maps", "_store")

    def __init__(self, record_id: int, seq_len: int, maps: np.ndarray, store: "AttnStore"):
        self.record_id = record_id
        self.seq_len = seq_len
        self._maps = maps
        self._store = store

    def _check(self):
        if self._store.closed:
            raise StoreClosedError("attention store was closed; view is no longer valid")

    @property
    def maps(self) -> np.ndarray:
        self._check()
        return self._maps

    def __len__(self) -> int:
        return self._maps.shape[0]

    def __getitem__(self, layer: int) -> np.ndarray:
        self._check()
        return self._maps[layer]


class AttnStore:
    """Single-writer append-only store; concurrent readers after building."""

    def __init__(self, path, num_layers: int, num_heads: int, writable: bool):
        self.path = Path(path)
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.writable = writable
        self.closed = False
        self._dir: dict[int, RecordDirectoryEntry] = {}
        self._order: list[int] = []
        self._data_end = _HEADER.size
        self._fh = None
        self._mm: mmap.mmap | None = None
        self._f32: np.ndarray | None = None  # float32 view over the whole mapping
        self._spans: dict[int, tuple[int, int, tuple[int, ...]]] = {}
        self._mapped_end = 0
        self._stale_maps: list[mmap.mmap] = []
        self._dirty = False

    # ------------------------------------------------------------ lifecycle

    @classmethod
    def create(cls, path, num_layers: int, num_heads: int) -> "AttnStore":
        if num_layers < 1 or num_heads < 1:
            raise ValueError("num_layers and num_heads must be >= 1")
        store = cls(path, num_layers, num_heads, writable=True)
        store._fh = open(store.path, "w+b")
        store._dirty = True
        store.flush()
        return store

    @classmethod
    def open(cls, path, writable: bool = False) -> "AttnStore":
        path = Path(path)
        try:
            size = path.stat().st_size
            fh = open(path, "r+b" if writable else "rb")
        except OSError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        try:
            header = fh.read(_HEADER.size)
            if len(header) < _HEADER.size:
                raise FormatError(f"{path}: truncated header")
            magic, version, layers, heads, dtype, count = _HEADER.unpack(header)
            if magic != STORE_MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}")
            if version != STORE_VERSION:
                raise FormatError(f"{path}: unsupported store version {version}")
            if dtype != DTYPE_F32:
                raise FormatError(f"{path}: unsupported dtype tag {dtype}")
            if layers < 1 or heads < 1:
                raise FormatError(f"{path}: bad layer/head counts")
            store = cls(path, layers, heads, writable)
            store._fh = fh
            store._read_directory(size, count)
        except BaseException:
            fh.close()
            raise
        if not writable:
            store._remap()
        return store

    def _read_directory(self, size: int, count: int) -> None:
        if size < _HEADER.size + _TRAILER.size:
            raise FormatError(f"{self.path}: file too small")
        self._fh.seek(size - _TRAILER.size)
        footer_at, magic = _TRAILER.unpack(self._fh.read(_TRAILER.size))
        if magic != STORE_MAGIC:
            raise FormatError(f"{self.path}: bad trailer magic {magic!r}")
        entry_size = _ENTRY_HEAD.size + self.num_layers * _SEGMENT.size
        if footer_at < _HEADER.size or footer_at + count * entry_size + _TRAILER.size != size:
            raise FormatError(f"{self.path}: directory does not match record count {count}")
        self._fh.seek(footer_at)
        raw = self._fh.read(count * entry_size)
        pos = 0
        for _ in range(count):
            rid, seq = _ENTRY_HEAD.unpack_from(raw, pos)
            pos += _ENTRY_HEAD.size
            segs = [_SEGMENT.unpack_from(raw, pos + i * _SEGMENT.size) for i in range(self.num_layers)]
            pos += self.num_layers * _SEGMENT.size
            entry = RecordDirectoryEntry(rid, seq, tuple(s[0] for s in segs), tuple(s[1] for s in segs))
            self._validate_entry(entry, footer_at)
            self._add_entry(entry)
        self._data_end = footer_at

    def _validate_entry(self, e: RecordDirectoryEntry, limit: int) -> None:
        blob = self.layer_blob_bytes(e.seq_len)
        if e.seq_len < 1 or e.record_id in self._dir:
            raise FormatError(f"{self.path}: bad directory entry for record {e.record_id}")
        for i, (off, length) in enumerate(zip(e.offsets, e.lengths)):
            if length != blob or off % 4 or off < _HEADER.size or off + length > limit:
                raise FormatError(f"{self.path}: bad segment {i} of record {e.record_id}")
            if i and off != e.offsets[i - 1] + e.lengths[i - 1]:
                raise FormatError(f"{self.path}: record {e.record_id} layers are not contiguous")

    def flush(self) -> None:
        """Write header and directory so the file on disk is complete."""
        if not self.writable or self.closed or not self._dirty:
            return
        fh = self._fh
        fh.seek(0)
        fh.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, self.num_layers, self.num_heads,
                              DTYPE_F32, len(self._order)))
        fh.seek(self._data_end)
        parts = []
        for rid in self._order:
            e = self._dir[rid]
            parts.append(_ENTRY_HEAD.pack(rid, e.seq_len))
            parts.extend(_SEGMENT.pack(o, n) for o, n in zip(e.offsets, e.lengths))
        parts.append(_TRAILER.pack(self._data_end, STORE_MAGIC))
        fh.write(b"".join(parts))
        fh.truncate()
        fh.flush()
        self._dirty = False

    def close(self) -> None:
        """Flush (if writable) and release the mapping; outstanding views become invalid."""
        if self.closed:
            return
        self.flush()
        self.closed = True
        self._f32 = None
        for mm in [self._mm, *self._stale_maps]:
            if mm is None:
                continue
            try:
                mm.close()
            except BufferError:
                # arrays still alias the mapping; it is unmapped when they are freed
                pass
        self._mm = None
        self._stale_maps.clear()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ------------------------------------------------------------ records

    def layer_blob_bytes(self, seq_len: int) -> int:
        return self.num_heads * seq_len * seq_len * 4

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, record_id: int) -> bool:
        return int(record_id) in self._dir

    @property
    def record_ids(self) -> list[int]:
        return list(self._order)

    def entry(self, record_id: int) -> RecordDirectoryEntry:
        try:
            return self._dir[int(record_id)]
        except KeyError:
            raise NotFoundError(record_id) from None

    def put_record(self, record_id: int, rec: AttentionRecord | np.ndarray) -> None:
        if self.closed:
            raise StoreClosedError("store is closed")
        if not self.writable:
            raise StoreError("store was opened read-only")
        maps = rec.maps if isinstance(rec, AttentionRecord) else np.asarray(rec)
        record_id = int(record_id)
        if record_id < 0:
            raise StoreError("record ids must be non-negative")
        if record_id in self._dir:
            raise StoreError(f"duplicate record id {record_id}")
        if maps.ndim != 4 or maps.shape[:2] != (self.num_layers, self.num_heads) or maps.shape[2] != maps.shape[3]:
            raise StoreError(f"record shape {maps.shape} does not match store "
                             f"({self.num_layers}, {self.num_heads}, L, L)")
        seq = maps.shape[-1]
        blob = self.layer_blob_bytes(seq)
        start = self._data_end
        self._fh.seek(start)
        self._fh.write(np.ascontiguousarray(maps, dtype="<f4").tobytes())
        offsets = tuple(start + i * blob for i in range(self.num_layers))
        self._add_entry(RecordDirectoryEntry(record_id, seq, offsets, (blob,) * self.num_layers))
        self._data_end = start + blob * self.num_layers
        self._dirty = True

    def _add_entry(self, e: RecordDirectoryEntry) -> None:
        self._dir[e.record_id] = e
        self._order.append(e.record_id)
        shape = (self.num_layers, self.num_heads, e.seq_len, e.seq_len)
        self._spans[e.record_id] = (e.start // 4, e.end // 4, shape)

    def _remap(self) -> None:
        if self._mm is not None:
            self._stale_maps.append(self._mm)
        self._fh.flush()
        size = os.fstat(self._fh.fileno()).st_size
        self._mm = mmap.mmap(self._fh.fileno(), size, access=mmap.ACCESS_READ)
        self._f32 = np.frombuffer(self._mm, dtype="<f4", count=size // 4)
        self._mapped_end = self._data_end

    def get_maps(self, record_id: int, n_layers: int | None = None) -> MappedAttnView:
        """Zero-copy view of all layers of ``record_id``."""
        if self.closed:
            raise StoreClosedError("store is closed")
        if n_layers is not None and n_layers != self.num_layers:
            raise StoreError(f"store holds {self.num_layers} layers, {n_layers} requested")
        try:
            lo, hi, shape = self._spans[record_id]
        except KeyError:
            raise NotFoundError(record_id) from None
        if self._f32 is None or 4 * hi > self._mapped_end:
            self.flush()
            self._remap()
        return MappedAttnView(record_id, shape[-1], self._f32[lo:hi].reshape(shape), self)

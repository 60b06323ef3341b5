"""Feature-vector database keyed by record id.

Two search modes share one vector table:

* ``flat``  - exact brute-force scan (float64 distances, ties to the lower id);
* ``graph`` - single-layer navigable small-world graph.  The graph only picks
  candidates; their distances are recomputed exactly before ranking.

The graph kernels are compiled with numba.
"""

from __future__ import annotations

import struct
import threading
from pathlib import Path
from typing import NamedTuple

import numba as nb
import numpy as np

from .errors import FormatError

INDEX_MAGIC = b"ACVI"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIIQI")
MODES = ("flat", "graph")

DEFAULT_M = 24
DEFAULT_EF_CONSTRUCTION = 200
DEFAULT_EF_SEARCH = 96


class VectorIndexError(ValueError):
    """Invalid use of a VectorIndex (duplicate id, wrong dimension, empty search)."""


class Hit(NamedTuple):
    id: int
    distance: float
    sim: float


# ---------------------------------------------------------------- graph kernels


@nb.njit(cache=True, fastmath=True)
def _d2(data, i, q):
    s = np.float32(0.0)
    for t in range(q.shape[0]):
        x = data[i, t] - q[t]
        s += x * x
    return s


@nb.njit(cache=True)
def _heap_push(keys, vals, size, k, v):
    i = size
    keys[i] = k
    vals[i] = v
    while i > 0:
        p = (i - 1) >> 1
        if keys[p] <= keys[i]:
            break
        keys[p], keys[i] = keys[i], keys[p]
        vals[p], vals[i] = vals[i], vals[p]
        i = p
    return size + 1


@nb.njit(cache=True)
def _heap_pop(keys, vals, size):
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        c = 2 * i + 1
        if c >= size:
            break
        if c + 1 < size and keys[c + 1] < keys[c]:
            c += 1
        if keys[i] <= keys[c]:
            break
        keys[c], keys[i] = keys[i], keys[c]
        vals[c], vals[i] = vals[i], vals[c]
        i = c
    return size


@nb.njit(cache=True)
def _beam_search(data, nbrs, deg, q, entry, ef, visited, tag):
    """Best-first beam search; returns up to ``ef`` (squared distance, row) sorted ascending."""
    cap = 4 * ef + nbrs.shape[1] + 16
    ck = np.empty(cap, np.float32)
    cv = np.empty(cap, np.int32)
    # result set kept as a max-heap through negated keys
    rk = np.empty(ef + 1, np.float32)
    rv = np.empty(ef + 1, np.int32)
    d0 = _d2(data, entry, q)
    cs = _heap_push(ck, cv, 0, d0, entry)
    rs = _heap_push(rk, rv, 0, -d0, entry)
    visited[entry] = tag
    while cs > 0:
        c = cv[0]
        if ck[0] > -rk[0] and rs >= ef:
            break
        cs = _heap_pop(ck, cv, cs)
        for j in range(deg[c]):
            u = nbrs[c, j]
            if visited[u] == tag:
                continue
            visited[u] = tag
            du = _d2(data, u, q)
            if rs < ef or du < -rk[0]:
                if cs == ck.shape[0]:
                    ck2 = np.empty(2 * cs, np.float32)
                    cv2 = np.empty(2 * cs, np.int32)
                    ck2[:cs] = ck
                    cv2[:cs] = cv
                    ck = ck2
                    cv = cv2
                cs = _heap_push(ck, cv, cs, du, u)
                rs = _heap_push(rk, rv, rs, -du, u)
                if rs > ef:
                    rs = _heap_pop(rk, rv, rs)
    keys = -rk[:rs]
    order = np.argsort(keys, kind="mergesort")
    return keys[order], rv[:rs][order]


@nb.njit(cache=True)
def _select_neighbors(data, base, keys, rows, m):
    """Keep a candidate only if it is closer to ``base`` than to every kept one."""
    keep = np.empty(m, np.int32)
    nk = 0
    for i in range(rows.shape[0]):
        c = rows[i]
        if c == base:
            continue
        ok = True
        for j in range(nk):
            if _d2(data, keep[j], data[c]) < keys[i]:
                ok = False
                break
        if ok:
            keep[nk] = c
            nk += 1
            if nk == m:
                break
    return keep[:nk]


@nb.njit(cache=True)
def _insert_rows(data, nbrs, deg, start, stop, m, ef_construction, visited, tag):
    mmax = nbrs.shape[1]
    tk = np.empty(mmax + 1, np.float32)
    tv = np.empty(mmax + 1, np.int32)
    for i in range(start, stop):
        if i == 0:
            continue
        tag += 1
        keys, rows = _beam_search(data, nbrs, deg, data[i], 0, ef_construction, visited, tag)
        chosen = _select_neighbors(data, i, keys, rows, m)
        for s in chosen:
            nbrs[i, deg[i]] = s
            deg[i] += 1
            if deg[s] < mmax:
                nbrs[s, deg[s]] = i
                deg[s] += 1
            else:
                for j in range(mmax):
                    tk[j] = _d2(data, nbrs[s, j], data[s])
                    tv[j] = nbrs[s, j]
                tk[mmax] = _d2(data, i, data[s])
                tv[mmax] = i
                order = np.argsort(tk)
                kept = _select_neighbors(data, s, tk[order], tv[order], mmax)
                deg[s] = kept.shape[0]
                for j in range(kept.shape[0]):
                    nbrs[s, j] = kept[j]
    return tag


# ---------------------------------------------------------------- index


class _Visited(threading.local):
    def __init__(self):
        self.marks = np.zeros(0, np.uint32)
        self.tag = 0

    def reserve(self, n: int, uses: int):
        if self.marks.shape[0] < n or self.tag + uses >= 0xFFFFFFFF:
            self.marks = np.zeros(max(n, 2 * self.marks.shape[0]), np.uint32)
            self.tag = 0
        return self.marks


class VectorIndex:
    """Euclidean nearest-neighbor index over fixed-length float32 vectors.

    ``add`` is single-writer; once building is finished any number of threads
    may call ``search`` concurrently.
    """

    def __init__(self, dimension: int = 128, mode: str = "flat", m: int = DEFAULT_M,
                 ef_construction: int = DEFAULT_EF_CONSTRUCTION, ef_search: int = DEFAULT_EF_SEARCH):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self.mode = mode
        self.m = m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self._n = 0
        self._vecs = np.zeros((0, dimension), np.float32)
        self._ids = np.zeros(0, np.int64)
        self._row_of: dict[int, int] = {}
        self._nbrs = np.zeros((0, 2 * m), np.int32)
        self._deg = np.zeros(0, np.int32)
        self._visited = _Visited()

    def __len__(self) -> int:
        return self._n

    def __contains__(self, record_id: int) -> bool:
        return int(record_id) in self._row_of

    @property
    def ids(self) -> np.ndarray:
        return self._ids[: self._n].copy()

    @property
    def vectors(self) -> np.ndarray:
        return self._vecs[: self._n]

    def get(self, record_id: int) -> np.ndarray:
        return self._vecs[self._row_of[int(record_id)]].copy()

    def _grow(self, need: int) -> None:
        cap = self._vecs.shape[0]
        if need <= cap:
            return
        new = max(need, 2 * cap, 64)
        vecs = np.zeros((new, self.dimension), np.float32)
        vecs[: self._n] = self._vecs[: self._n]
        ids = np.zeros(new, np.int64)
        ids[: self._n] = self._ids[: self._n]
        self._vecs, self._ids = vecs, ids
        if self.mode == "graph":
            nbrs = np.zeros((new, 2 * self.m), np.int32)
            nbrs[: self._n] = self._nbrs[: self._n]
            deg = np.zeros(new, np.int32)
            deg[: self._n] = self._deg[: self._n]
            self._nbrs, self._deg = nbrs, deg

    def add(self, record_id: int, vector) -> None:
        self.add_many([record_id], np.asarray(vector, dtype=np.float32)[None, :])

    def add_many(self, record_ids, vectors) -> None:
        vectors = np.asarray(vectors, dtype=np.float32)
        record_ids = [int(i) for i in record_ids]
        if vectors.ndim != 2 or vectors.shape[1] != self.dimension:
            raise VectorIndexError(f"vectors must have shape (n, {self.dimension}), got {vectors.shape}")
        if len(record_ids) != vectors.shape[0]:
            raise VectorIndexError("one id per vector required")
        if len(set(record_ids)) != len(record_ids) or any(i in self._row_of for i in record_ids):
            raise VectorIndexError("duplicate record id")
        if any(i < 0 for i in record_ids):
            raise VectorIndexError("record ids must be non-negative")
        if not np.all(np.isfinite(vectors)):
            raise VectorIndexError("vectors must be finite")
        start = self._n
        stop = start + len(record_ids)
        self._grow(stop)
        self._vecs[start:stop] = vectors
        self._ids[start:stop] = record_ids
        for row, rid in enumerate(record_ids, start):
            self._row_of[rid] = row
        self._n = stop
        if self.mode == "graph":
            marks = self._visited.reserve(self._vecs.shape[0], stop - start + 1)
            self._visited.tag = int(_insert_rows(
                self._vecs, self._nbrs, self._deg, start, stop, self.m,
                self.ef_construction, marks, np.uint32(self._visited.tag)))

    def _rank(self, rows: np.ndarray, q: np.ndarray, k: int) -> list[Hit]:
        diff = self._vecs[rows].astype(np.float64) - q.astype(np.float64)
        d2 = np.einsum("ij,ij->i", diff, diff)
        ids = self._ids[rows]
        order = np.lexsort((ids, d2))[:k]
        out = []
        for j in order:
            dist = float(np.sqrt(d2[j]))
            out.append(Hit(int(ids[j]), dist, 1.0 / (1.0 + dist)))
        return out

    def search(self, query, k: int = 1) -> list[Hit]:
        """The ``k`` nearest stored vectors as ``(id, distance, sim)``, nearest first."""
        if self._n == 0:
            raise VectorIndexError("search on an empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float32)
        if q.shape != (self.dimension,):
            raise VectorIndexError(f"query must have shape ({self.dimension},), got {q.shape}")
        if self.mode == "flat":
            return self._rank(self._flat_candidates(q, k), q, k)
        ef = max(self.ef_search, k)
        marks = self._visited.reserve(self._vecs.shape[0], 1)
        self._visited.tag += 1
        _, rows = _beam_search(self._vecs, self._nbrs, self._deg, q, 0, ef, marks,
                               np.uint32(self._visited.tag))
        return self._rank(rows, q, k)

    def _flat_candidates(self, q: np.ndarray, k: int) -> np.ndarray:
        n = self._n
        if n <= 4 * k:
            return np.arange(n)
        diff = self._vecs[:n].astype(np.float64) - q.astype(np.float64)
        d2 = np.einsum("ij,ij->i", diff, diff)
        kth = np.partition(d2, k - 1)[k - 1]
        return np.flatnonzero(d2 <= kth)

    def save(self, path) -> None:
        rec = np.zeros(self._n, dtype=self._record_dtype(self.dimension))
        rec["id"] = self._ids[: self._n]
        rec["v"] = self._vecs[: self._n]
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, self.dimension, self._n, MODES.index(self.mode)))
            fh.write(rec.tobytes())

    @staticmethod
    def _record_dtype(dimension: int) -> np.dtype:
        return np.dtype([("id", "<u8"), ("v", "<f4", (dimension,))])

    @classmethod
    def load(cls, path, **graph_params) -> "VectorIndex":
        """Read an index file; the graph (if any) is rebuilt in stored order."""
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: truncated index header")
        magic, version, dim, count, mode = _HEADER.unpack_from(raw, 0)
        if magic != INDEX_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != INDEX_VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")
        if mode >= len(MODES) or dim < 1:
            raise FormatError(f"{path}: bad header fields")
        dt = cls._record_dtype(dim)
        if len(raw) != _HEADER.size + count * dt.itemsize:
            raise FormatError(f"{path}: payload size does not match count {count}")
        rec = np.frombuffer(raw, dt, count, _HEADER.size)
        index = cls(dim, MODES[mode], **graph_params)
        if count:
            index.add_many(rec["id"].tolist(), rec["v"])
        return index

"""Descriptor database: hash-bucketed storage, matching, candidate voting, binary dump.

Stored descriptors live in append-only columns. Buckets are keyed by the
quantized sorted sides; the bucket index is a stack of sorted runs of packed
keys, merged like a binary counter so inserts stay amortized O(log n) and a
probe is a handful of ``searchsorted`` calls.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .descriptor import DescriptorArray, hash_keys
from .instances import Instance, KeyInstanceSet
from .verification import PlaneArray

KEY_BITS = 20
KEY_LIMIT = 1 << KEY_BITS
_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)  # (27, 3)


@dataclass(frozen=True)
class MatchConfig:
    side_tol: float = 0.2
    size_ratio_tol: float = 3.0
    num_candidates: int = 10
    require_label_match: bool = True
    # candidate frame j is eligible for query frame i only when i - j > exclusion; None disables
    exclusion: int | None = 100

    def __post_init__(self):
        if self.side_tol <= 0:
            raise ValueError("side_tol must be positive")
        if not self.size_ratio_tol >= 1:
            raise ValueError("size_ratio_tol must be >= 1")
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")
        if self.exclusion is not None and self.exclusion < 0:
            raise ValueError("exclusion must be >= 0 or None")


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    key_set: KeyInstanceSet
    planes: PlaneArray
    descriptor_count: int
    row_start: int

    @property
    def centroids(self) -> np.ndarray:
        return self.key_set.centroids


@dataclass(eq=False)
class CandidateScore:
    """One loop candidate: its frame, vote count and matched descriptor pairs.

    ``query_index[i]`` is the query descriptor paired with ``stored[i]``.
    """

    frame_id: int
    votes: int
    query_index: np.ndarray
    stored: DescriptorArray
    query: DescriptorArray = field(repr=False)

    @property
    def query_vertices(self) -> np.ndarray:
        return self.query.vertices[self.query_index]

    @property
    def matched_pairs(self) -> list:
        return [(self.query[int(i)], self.stored[k]) for k, i in enumerate(self.query_index)]


class _Column:
    """Append-only array with amortized growth."""

    def __init__(self, shape_tail=(), dtype=np.float64):
        self._buf = np.empty((16,) + tuple(shape_tail), dtype=dtype)
        self.n = 0

    def append(self, values):
        values = np.asarray(values, dtype=self._buf.dtype)
        need = self.n + len(values)
        if need > len(self._buf):
            cap = max(need, 2 * len(self._buf))
            buf = np.empty((cap,) + self._buf.shape[1:], dtype=self._buf.dtype)
            buf[: self.n] = self._buf[: self.n]
            self._buf = buf
        self._buf[self.n : need] = values
        self.n = need

    @property
    def data(self) -> np.ndarray:
        return self._buf[: self.n]


def pack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return (keys[..., 0] << (2 * KEY_BITS)) | (keys[..., 1] << KEY_BITS) | keys[..., 2]


class DescriptorDB:
    def __init__(self, resolution: float = 0.2):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = float(resolution)
        self._frames: dict[int, FrameRecord] = {}
        self._last_frame: int | None = None
        self._keys = _Column((3,), np.int64)
        self._sides = _Column((3,), np.float64)
        self._labels = _Column((3,), np.int8)
        self._sizes = _Column((3,), np.int64)
        self._vidx = _Column((3,), np.int64)
        self._frame = _Column((), np.int64)
        self._runs: list[tuple[np.ndarray, np.ndarray, int]] = []  # (sorted packed keys, rows, frames)

    # -- storage -----------------------------------------------------------
    def __len__(self) -> int:
        return self._frame.n

    @property
    def frame_ids(self) -> list[int]:
        return list(self._frames)

    def frame(self, frame_id: int) -> FrameRecord:
        return self._frames[frame_id]

    def insert_frame(self, descriptors: DescriptorArray, key_set: KeyInstanceSet, planes=None) -> None:
        fid = int(key_set.frame_id)
        if self._last_frame is not None and fid <= self._last_frame:
            raise ValueError(f"frame {fid} inserted after frame {self._last_frame}; frame ids must increase")
        if len(descriptors) and np.any(descriptors.frame != fid):
            raise ValueError("descriptor frame ids disagree with the key set")
        if len(descriptors) and (descriptors.vertex_index.min() < 0
                                 or descriptors.vertex_index.max() >= len(key_set)):
            raise ValueError("descriptor vertex index outside the key set")
        planes = PlaneArray.from_planes(planes if planes is not None else [])
        start = len(self)
        keys = hash_keys(descriptors.sides, self.resolution)
        if len(keys) and (keys.min() < 0 or keys.max() >= KEY_LIMIT):
            raise ValueError("side length outside the hashable range")
        self._keys.append(keys)
        self._sides.append(descriptors.sides)
        self._labels.append(descriptors.labels)
        self._sizes.append(descriptors.sizes)
        self._vidx.append(descriptors.vertex_index)
        self._frame.append(np.full(len(descriptors), fid))
        self._frames[fid] = FrameRecord(fid, key_set, planes, len(descriptors), start)
        self._last_frame = fid
        if len(descriptors):
            packed = pack_keys(keys)
            order = np.argsort(packed, kind="stable")
            self._runs.append((packed[order], start + order, 1))
            self._compact()

    def _compact(self):
        while len(self._runs) >= 2 and self._runs[-2][2] <= self._runs[-1][2]:
            (k1, r1, f1), (k2, r2, f2) = self._runs[-2], self._runs[-1]
            keys = np.concatenate([k1, k2])
            rows = np.concatenate([r1, r2])
            order = np.argsort(keys, kind="stable")
            self._runs[-2:] = [(keys[order], rows[order], f1 + f2)]

    def buckets(self) -> dict[tuple[int, int, int], list[int]]:
        """Bucket contents as ``{hash key: [row, ...]}`` (rows in insertion order)."""
        out: dict[tuple[int, int, int], list[int]] = {}
        for row, key in enumerate(map(tuple, self._keys.data.tolist())):
            out.setdefault(key, []).append(row)
        return out

    def stored(self, rows=None) -> DescriptorArray:
        """Stored descriptors (all, or at ``rows``) with vertex centroids resolved."""
        rows = np.arange(len(self)) if rows is None else np.asarray(rows, dtype=np.int64)
        frames = self._frame.data[rows]
        vidx = self._vidx.data[rows]
        verts = np.empty((len(rows), 3, 3))
        first = np.empty((len(rows), 3), dtype=np.int64)
        for fid in np.unique(frames):
            sel = frames == fid
            ks = self._frames[int(fid)].key_set
            verts[sel] = ks.centroids[vidx[sel]]
            first[sel] = np.array([i.first_index for i in ks.instances], dtype=np.int64)[vidx[sel]]
        return DescriptorArray(self._sides.data[rows], self._labels.data[rows], self._sizes.data[rows],
                               vidx, verts, frames, first)

    # -- matching ------------------------------------------------------------
    def _probe(self, qkeys: np.ndarray):
        """All (query row, stored row) pairs whose keys are within one step per component."""
        nq = len(qkeys)
        probes = qkeys[:, None, :] + _OFFSETS[None, :, :]  # (nq, 27, 3)
        ok = np.all((probes >= 0) & (probes < KEY_LIMIT), axis=2)
        qi = np.broadcast_to(np.arange(nq)[:, None], ok.shape)[ok]
        pk = pack_keys(probes[ok])
        q_parts, r_parts = [], []
        for keys, rows, _ in self._runs:
            lo = np.searchsorted(keys, pk, "left")
            hi = np.searchsorted(keys, pk, "right")
            cnt = hi - lo
            tot = int(cnt.sum())
            if tot == 0:
                continue
            hit = cnt > 0
            cnt, lo = cnt[hit], lo[hit]
            starts = np.cumsum(cnt) - cnt
            pos = np.arange(tot) - np.repeat(starts - lo, cnt)
            q_parts.append(np.repeat(qi[hit], cnt))
            r_parts.append(rows[pos])
        if not q_parts:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        return np.concatenate(q_parts), np.concatenate(r_parts)

    def match_pairs(self, query: DescriptorArray, cfg: MatchConfig) -> tuple[np.ndarray, np.ndarray]:
        """Matched (query index, stored row) pairs, sorted by query index then row."""
        empty = np.empty(0, dtype=np.int64)
        if len(query) == 0 or len(self) == 0:
            return empty, empty
        qi, rows = self._probe(hash_keys(query.sides, self.resolution))
        if cfg.exclusion is not None:
            qf = query.frame[qi]
            keep = qf - self._frame.data[rows] > cfg.exclusion
            qi, rows = qi[keep], rows[keep]
        diff = np.abs(query.sides[qi] - self._sides.data[rows])
        keep = np.all(diff <= cfg.side_tol, axis=1)
        qi, rows = qi[keep], rows[keep]
        if cfg.require_label_match and len(qi):
            keep = np.all(query.labels[qi] == self._labels.data[rows], axis=1)
            qi, rows = qi[keep], rows[keep]
        if math.isfinite(cfg.size_ratio_tol) and len(qi):
            a, b = query.sizes[qi], self._sizes.data[rows]
            keep = np.all(np.maximum(a, b) <= cfg.size_ratio_tol * np.minimum(a, b), axis=1)
            qi, rows = qi[keep], rows[keep]
        order = np.lexsort((rows, qi))
        return qi[order], rows[order]

    def match_descriptor(self, q, cfg: MatchConfig) -> DescriptorArray:
        """Stored descriptors matching a single query descriptor."""
        query = q if isinstance(q, DescriptorArray) else DescriptorArray.from_descriptors([q])
        _, rows = self.match_pairs(query[:1], cfg)
        return self.stored(rows)

    def retrieve_candidates(self, query: DescriptorArray, cfg: MatchConfig) -> list[CandidateScore]:
        """Frames ranked by matched-pair votes (ties: newer frame first)."""
        qi, rows = self.match_pairs(query, cfg)
        if len(qi) == 0:
            return []
        frames = self._frame.data[rows]
        fids, votes = np.unique(frames, return_counts=True)
        rank = np.lexsort((-fids, -votes))[: cfg.num_candidates]
        out = []
        for j in rank:
            sel = frames == fids[j]
            out.append(CandidateScore(int(fids[j]), int(votes[j]), qi[sel], self.stored(rows[sel]), query))
        return out

    # -- serialization ---------------------------------------------------------
    def __eq__(self, other):
        if not isinstance(other, DescriptorDB):
            return NotImplemented
        if self.resolution != other.resolution or list(self._frames) != list(other._frames):
            return False
        for a, b in zip(self._frames.values(), other._frames.values()):
            if (a.key_set != b.key_set or a.planes != b.planes
                    or a.descriptor_count != b.descriptor_count or a.row_start != b.row_start):
                return False
        cols = ("_keys", "_sides", "_labels", "_sizes", "_vidx", "_frame")
        return all(np.array_equal(getattr(self, c).data, getattr(other, c).data) for c in cols)


# Binary dump, little-endian:
#   b"RTDB" | version u32 | resolution f64 | frame_count u32 | descriptor_count u64
#   per frame: frame_id i64 | instances u32 | planes u32 | descriptors u32
#              instance records (cx cy cz f64, label u8, size u32, first_index u32)
#              plane records (qx qy qz f64, ux uy uz f64, layer u8, support u32)
#   descriptor columns, each row-major over all rows:
#              bucket keys 3*i32 | sides 3*f64 | labels 3*i8 | sizes 3*u32 | vertex index 3*u16 | frame i64
DB_MAGIC = b"RTDB"
DB_VERSION = 1
_DB_HEAD = struct.Struct("<4sIdIQ")
_FRAME_HEAD = struct.Struct("<qIII")
_INST = np.dtype([("c", "<f8", 3), ("label", "u1"), ("size", "<u4"), ("first", "<u4")])
_PLANE = np.dtype([("q", "<f8", 3), ("u", "<f8", 3), ("layer", "u1"), ("support", "<u4")])
_COLS = (("_keys", "<i4"), ("_sides", "<f8"), ("_labels", "i1"), ("_sizes", "<u4"), ("_vidx", "<u2"), ("_frame", "<i8"))


def save_db(db: DescriptorDB, path) -> None:
    with open(Path(path), "wb") as fh:
        fh.write(_DB_HEAD.pack(DB_MAGIC, DB_VERSION, db.resolution, len(db._frames), len(db)))
        for rec in db._frames.values():
            fh.write(_FRAME_HEAD.pack(rec.frame_id, len(rec.key_set), len(rec.planes), rec.descriptor_count))
            inst = np.empty(len(rec.key_set), dtype=_INST)
            inst["c"] = rec.key_set.centroids
            inst["label"] = rec.key_set.labels
            inst["size"] = rec.key_set.sizes
            inst["first"] = [i.first_index for i in rec.key_set.instances]
            fh.write(inst.tobytes())
            pl = np.empty(len(rec.planes), dtype=_PLANE)
            pl["q"], pl["u"] = rec.planes.centers, rec.planes.normals
            pl["layer"], pl["support"] = rec.planes.layers, rec.planes.support
            fh.write(pl.tobytes())
        for name, dt in _COLS:
            fh.write(np.ascontiguousarray(getattr(db, name).data, dtype=dt).tobytes())


def load_db(path) -> DescriptorDB:
    data = Path(path).read_bytes()
    try:
        magic, version, res, nframes, ndesc = _DB_HEAD.unpack_from(data, 0)
    except struct.error:
        raise ValueError("truncated database header") from None
    if magic != DB_MAGIC or version != DB_VERSION:
        raise ValueError(f"not a version-{DB_VERSION} descriptor database")
    db = DescriptorDB(res)
    off = _DB_HEAD.size
    records = []
    for _ in range(nframes):
        fid, ni, npl, nd = _FRAME_HEAD.unpack_from(data, off)
        off += _FRAME_HEAD.size
        inst = np.frombuffer(data, _INST, ni, off)
        off += ni * _INST.itemsize
        pl = np.frombuffer(data, _PLANE, npl, off)
        off += npl * _PLANE.itemsize
        ks = KeyInstanceSet(tuple(
            Instance(tuple(float(v) for v in row["c"]), int(row["label"]), int(row["size"]), int(row["first"]))
            for row in inst), fid)
        planes = PlaneArray(pl["q"], pl["u"], pl["layer"].astype(np.int64), pl["support"].astype(np.int64))
        records.append((fid, ks, planes, nd))
    cols = {}
    for name, dt in _COLS:
        width = 1 if name == "_frame" else 3
        arr = np.frombuffer(data, np.dtype(dt), ndesc * width, off)
        off += arr.nbytes
        cols[name] = arr.reshape(ndesc, 3) if width == 3 else arr
    if off != len(data):
        raise ValueError("trailing bytes in descriptor database")
    start = 0
    for fid, ks, planes, nd in records:
        sl = slice(start, start + nd)
        batch = DescriptorArray(cols["_sides"][sl], cols["_labels"][sl], cols["_sizes"][sl],
                                cols["_vidx"][sl], np.zeros((nd, 3, 3)), np.full(nd, fid))
        db.insert_frame(batch, ks, planes)
        if not np.array_equal(db._keys.data[sl], cols["_keys"][sl]):
            raise ValueError(f"bucket keys of frame {fid} disagree with their sides")
        start += nd
    return db

"""Organized LiDAR scans with a reflectivity channel: containers, file formats, statistics.

Binary layout (little-endian)::

    header   b"RTRP" | version u32 | point_count u32 | ring_count u32
    records  f32 x | f32 y | f32 z | f32 r | u16 ring      (18 bytes each)

Text layout::

    rtrp v1 <count> <rings>
    x y z r ring
    ...

Coordinates and reflectivity are held as float64 in memory. Binary files store
float32, so a cloud round-trips bit-exactly when its values are float32
representable (every loaded or synthesized cloud is).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RTRP"
VERSION = 1
HEADER = struct.Struct("<4sIII")
RECORD_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "<f4"), ("ring", "<u2")]
)
FORMATS = ("organized-binary", "organized-text")


class ScanFormatError(ValueError):
    """A scan file violates the organized-scan format."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An organized scan.

    ``xyz`` is (N, 3) in the sensor frame, ``r`` the reflectivity, ``ring`` the
    scanline of every point. Points of a ring appear in azimuthal scan order.
    """

    xyz: np.ndarray
    r: np.ndarray
    ring: np.ndarray
    ring_count: int
    frame_id: int = 0
    _ring_order: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        r = np.ascontiguousarray(self.r, dtype=np.float64).reshape(-1)
        ring = np.ascontiguousarray(self.ring, dtype=np.int64).reshape(-1)
        if not (len(xyz) == len(r) == len(ring)):
            raise ValueError("xyz, r and ring must have the same length")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("non-finite coordinate")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise ValueError("reflectivity must be finite and non-negative")
        if self.ring_count < 0 or (len(ring) and (ring.min() < 0 or ring.max() >= self.ring_count)):
            raise ValueError("ring ids must lie in [0, ring_count)")
        if self.frame_id < 0:
            raise ValueError("frame_id must be non-negative")
        for name, arr in (("xyz", xyz), ("r", r), ("ring", ring)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.r)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.ring_count == other.ring_count
            and self.frame_id == other.frame_id
            and np.array_equal(self.xyz, other.xyz)
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.ring, other.ring)
        )

    @property
    def ring_order(self) -> np.ndarray:
        """Point indices grouped by ring, scan order preserved inside each ring."""
        if self._ring_order is None:
            order = np.argsort(self.ring, kind="stable")
            order.setflags(write=False)
            object.__setattr__(self, "_ring_order", order)
        return self._ring_order

    def with_reflectivity(self, r: np.ndarray) -> "PointCloud":
        return PointCloud(self.xyz, r, self.ring, self.ring_count, self.frame_id)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "PointCloud":
        xyz = self.xyz @ np.asarray(rotation).T + np.asarray(translation)
        return PointCloud(xyz, self.r, self.ring, self.ring_count, self.frame_id)

    def subset(self, indices) -> "PointCloud":
        """Points at ``indices`` (ring order is kept as long as indices are ascending)."""
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(self.xyz[idx], self.r[idx], self.ring[idx], self.ring_count, self.frame_id)


@dataclass(frozen=True)
class ReflectivityStats:
    mean: float
    stddev: float
    count: int


def reflectivity_stats(cloud: PointCloud) -> ReflectivityStats:
    """Population mean and standard deviation of the reflectivity channel."""
    n = len(cloud)
    if n == 0:
        raise ValueError("reflectivity statistics of an empty cloud are undefined")
    r = cloud.r
    mean = float(r.mean())
    var = float(np.mean((r - mean) ** 2))
    return ReflectivityStats(mean=mean, stddev=math.sqrt(var), count=n)


def _fmt(path, fmt):
    if fmt is None:
        fmt = "organized-text" if str(path).endswith((".txt", ".rtrp.txt")) else "organized-binary"
    if fmt not in FORMATS:
        raise ValueError(f"unknown scan format {fmt!r}; expected one of {FORMATS}")
    return fmt


def load_scan(path, fmt: str | None = None, frame_id: int = 0) -> PointCloud:
    """Read a scan written in one of the organized formats.

    Raises ``ScanFormatError`` naming the offending byte offset (binary) or
    line (text) together with the 0-based record index.
    """
    fmt = _fmt(path, fmt)
    data = Path(path).read_bytes()
    if fmt == "organized-binary":
        return _parse_binary(data, frame_id)
    return _parse_text(data.decode("ascii", errors="replace"), frame_id)


def _parse_binary(data: bytes, frame_id: int) -> PointCloud:
    if len(data) < HEADER.size:
        raise ScanFormatError(f"truncated header at byte 0: need {HEADER.size} bytes, got {len(data)}")
    magic, version, count, rings = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ScanFormatError(f"bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise ScanFormatError(f"unsupported version {version} at byte 4")
    body = len(data) - HEADER.size
    need = count * RECORD_DTYPE.itemsize
    if body < need:
        rec = body // RECORD_DTYPE.itemsize
        raise ScanFormatError(
            f"truncated record {rec} at byte {HEADER.size + rec * RECORD_DTYPE.itemsize}: "
            f"header declares {count} records"
        )
    if body > need:
        raise ScanFormatError(f"trailing data at byte {HEADER.size + need}")
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=HEADER.size)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    r = rec["r"].astype(np.float64)
    ring = rec["ring"].astype(np.int64)

    def where(i):
        return f"record {i} at byte {HEADER.size + i * RECORD_DTYPE.itemsize}"

    _validate_records(xyz, r, ring, rings, where)
    return PointCloud(xyz, r, ring, rings, frame_id)


def _validate_records(xyz, r, ring, rings, where):
    bad = ~np.all(np.isfinite(xyz), axis=1)
    if bad.any():
        raise ScanFormatError(f"non-finite coordinate in {where(int(np.argmax(bad)))}")
    bad = ~np.isfinite(r) | (r < 0)
    if bad.any():
        i = int(np.argmax(bad))
        raise ScanFormatError(f"invalid reflectivity {r[i]} in {where(i)}")
    bad = ring >= rings
    if bad.any():
        i = int(np.argmax(bad))
        raise ScanFormatError(f"ring {ring[i]} outside [0, {rings}) in {where(i)}")


def _parse_text(text: str, frame_id: int) -> PointCloud:
    lines = text.splitlines()
    if not lines:
        raise ScanFormatError("missing header at line 1")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "rtrp" or head[1] != "v1":
        raise ScanFormatError(f"malformed header at line 1: {lines[0]!r}")
    try:
        count, rings = int(head[2]), int(head[3])
    except ValueError:
        raise ScanFormatError(f"malformed header at line 1: {lines[0]!r}") from None
    if count < 0 or rings < 0:
        raise ScanFormatError("negative count in header at line 1")
    body = [ln for ln in lines[1:]]
    while body and not body[-1].strip():
        body.pop()
    if len(body) < count:
        raise ScanFormatError(f"truncated record {len(body)} at line {len(body) + 2}: header declares {count}")
    if len(body) > count:
        raise ScanFormatError(f"trailing data at line {count + 2}")
    xyz = np.empty((count, 3))
    r = np.empty(count)
    ring = np.empty(count, dtype=np.int64)
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 5:
            raise ScanFormatError(f"malformed record {i} at line {i + 2}: expected 5 fields, got {len(parts)}")
        try:
            xyz[i] = [float(p) for p in parts[:3]]
            r[i] = float(parts[3])
            ring[i] = int(parts[4])
        except ValueError:
            raise ScanFormatError(f"malformed record {i} at line {i + 2}: {ln!r}") from None
        if ring[i] < 0:
            raise ScanFormatError(f"negative ring in record {i} at line {i + 2}")
    _validate_records(xyz, r, ring, rings, lambda i: f"record {i} at line {i + 2}")
    return PointCloud(xyz, r, ring, rings, frame_id)


def save_scan(cloud: PointCloud, path, fmt: str | None = None) -> None:
    fmt = _fmt(path, fmt)
    if cloud.ring_count > 0xFFFF + 1:
        raise ValueError("ring ids do not fit the u16 ring field")
    path = Path(path)
    if fmt == "organized-binary":
        rec = np.empty(len(cloud), dtype=RECORD_DTYPE)
        rec["x"], rec["y"], rec["z"] = cloud.xyz.T
        rec["r"] = cloud.r
        rec["ring"] = cloud.ring
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, VERSION, len(cloud), cloud.ring_count))
            fh.write(rec.tobytes())
        return
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"rtrp v1 {len(cloud)} {cloud.ring_count}\n")
        for (x, y, z), r, ring in zip(cloud.xyz.tolist(), cloud.r.tolist(), cloud.ring.tolist()):
            fh.write(f"{x!r} {y!r} {z!r} {r!r} {ring}\n")

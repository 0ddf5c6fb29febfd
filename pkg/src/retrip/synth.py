"""Deterministic synthetic worlds and organized LiDAR scans with reflectivity.

Scenes are built from axis-aligned boxes (buildings, walls, pillars, poles,
marker plates) over a ground plane at z = 0. Scans ray-cast a ring x azimuth
beam grid, then overwrite a share of the returns with transient spherical
clutter. Every random draw comes from a generator seeded by ``(seed, purpose,
index)`` so output does not depend on rendering order.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .scan_io import PointCloud, save_scan
from .verification import RigidTransform

KIND_GROUND, KIND_BUILDING, KIND_WALL, KIND_POLE, KIND_MARKER, KIND_CLUTTER = range(6)
_SCENE_STREAM, _SCAN_STREAM = 1, 2


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 1
    layout: str = "town"  # town | corridor | room
    num_markers: int = 30
    marker_reflectivity: tuple[float, float] = (200.0, 10.0)  # mean, half-width
    background_reflectivity: tuple[float, float] = (20.0, 5.0)
    num_walls: int = 60
    world_extent: float = 160.0
    dynamic_ratio: float = 0.2
    # transient objects (vehicles, people); None uses the background range
    clutter_reflectivity: tuple[float, float] | None = None
    noise_sigma_xyz: float = 0.01
    noise_sigma_r: float = 2.0
    # layout geometry
    track_length: float = 500.0
    laps: int = 2
    lane_offset: float = 1.5
    clearance: float = 6.0
    sensor_height: float = 1.8
    marker_size: tuple[float, float] = (0.3, 1.0)
    pole_marker: str = "plate"  # plate: flat sign facing the road; sleeve: reflective band around the pole
    corridor_width: float = 3.0
    corridor_height: float = 3.0
    bay_spacing: float = 5.0

    def __post_init__(self):
        if self.layout not in ("town", "corridor", "room"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.pole_marker not in ("plate", "sleeve"):
            raise ValueError(f"unknown pole_marker {self.pole_marker!r}")
        if not 0 <= self.dynamic_ratio < 1:
            raise ValueError("dynamic_ratio must lie in [0, 1)")
        numeric = (self.num_markers, self.num_walls, self.world_extent, self.noise_sigma_xyz,
                   self.noise_sigma_r, self.track_length, *self.marker_reflectivity,
                   *self.background_reflectivity, *(self.clutter_reflectivity or ()))
        if min(numeric) < 0:
            raise ValueError("scene parameters must be non-negative")


@dataclass(frozen=True)
class ScanModel:
    rings: int = 32
    points_per_ring: int = 1024
    vertical_fov: tuple[float, float] = (-20.0, 11.0)  # degrees, lowest and highest beam
    max_range: float = 120.0

    def __post_init__(self):
        if self.rings < 1 or self.points_per_ring < 1:
            raise ValueError("rings and points_per_ring must be >= 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    def directions(self) -> np.ndarray:
        """Unit beam directions in the sensor frame, (rings, points_per_ring, 3)."""
        lo, hi = np.radians(self.vertical_fov)
        elev = np.linspace(lo, hi, self.rings) if self.rings > 1 else np.array([(lo + hi) / 2])
        az = 2 * np.pi * np.arange(self.points_per_ring) / self.points_per_ring
        ce, se = np.cos(elev)[:, None], np.sin(elev)[:, None]
        return np.stack([ce * np.cos(az), ce * np.sin(az), np.broadcast_to(se, (self.rings, len(az)))], axis=-1)


@dataclass(frozen=True)
class Marker:
    id: int
    kind: str  # "wall" or "pole"
    center: tuple[float, float, float]
    width: float
    height: float
    axis: int  # world axis of the plate normal
    reflectivity: float
    box: int


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[RigidTransform, ...]
    arclen: np.ndarray

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


@dataclass(eq=False)
class Scene:
    config: SceneConfig
    box_min: np.ndarray
    box_max: np.ndarray
    box_r: np.ndarray
    box_kind: np.ndarray
    ground_r: float
    markers: list[Marker]
    path: np.ndarray = field(repr=False)  # dense polyline of the reference route, (n, 3)

    def manifest_bytes(self) -> bytes:
        """Canonical byte serialization (used for determinism checks)."""
        parts = [self.box_min, self.box_max, self.box_r, self.box_kind.astype(np.int64), self.path,
                 np.array([self.ground_r])]
        body = b"".join(np.ascontiguousarray(p).tobytes() for p in parts)
        return body + json.dumps([dataclasses.asdict(m) for m in self.markers]).encode()


def _rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def _surface_r(rng, mean_spread, n=None):
    mean, spread = mean_spread
    return rng.uniform(mean - spread, mean + spread, n)


# -- geometry ------------------------------------------------------------------------

def ray_boxes(origin: np.ndarray, dirs: np.ndarray, bmin: np.ndarray, bmax: np.ndarray):
    """Nearest positive hit distance and box index per ray (inf / -1 on miss)."""
    m = len(dirs)
    best_t = np.full(m, np.inf)
    best_b = np.full(m, -1, dtype=np.int64)
    if len(bmin) == 0:
        return best_t, best_b
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for b in range(len(bmin)):
        t1 = (bmin[b] - origin) * inv
        t2 = (bmax[b] - origin) * inv
        tn = np.nanmax(np.minimum(t1, t2), axis=1)
        tf = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tf >= tn) & (tn > 1e-9) & (tn < best_t)
        best_t[hit] = tn[hit]
        best_b[hit] = b
    return best_t, best_b


def _box_distance(point_xy: np.ndarray, bmin: np.ndarray, bmax: np.ndarray) -> np.ndarray:
    """Planar distance from points (n, 2) to one box footprint."""
    d = np.maximum(np.maximum(bmin[:2] - point_xy, point_xy - bmax[:2]), 0.0)
    return np.linalg.norm(d, axis=1)


def _resample(path: np.ndarray, spacing: float):
    seg = np.linalg.norm(np.diff(path[:, :2], axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = int(math.floor(s[-1] / spacing + 1e-9))
    q = spacing * np.arange(n)
    pts = np.stack([np.interp(q, s, path[:, a]) for a in range(3)], axis=1)
    return pts, q


def _figure_eight(ratio: float = 1.5, start: float = 0.15, n: int = 4000) -> np.ndarray:
    """Closed figure-eight of unit length: two unit circles centred at (+-ratio, 0)
    joined by straight roads that cross at the origin. ``start`` is the fraction
    of the lap at which the loop begins."""
    a = math.asin(1.0 / ratio)
    reach = math.sqrt(ratio * ratio - 1.0)  # origin to tangent point
    pieces = []
    for sgn in (1.0, -1.0):
        centre = np.array([sgn * ratio, 0.0])
        t_in = reach * np.array([sgn * math.cos(a), math.sin(a)])
        t_out = reach * np.array([sgn * math.cos(a), -math.sin(a)])
        a_in = math.atan2(*(t_in - centre)[::-1])
        a_out = math.atan2(*(t_out - centre)[::-1])
        if sgn > 0 and a_out > a_in:
            a_out -= 2 * np.pi
        elif sgn < 0 and a_out < a_in:
            a_out += 2 * np.pi
        ang = np.linspace(a_in, a_out, n)
        pieces += [np.linspace(np.zeros(2), t_in, n), centre + np.stack([np.cos(ang), np.sin(ang)], axis=1),
                   np.linspace(t_out, np.zeros(2), n)]
    loop = np.concatenate(pieces)[:-1]
    loop = np.roll(loop, -int(start * len(loop)), axis=0)
    loop = np.vstack([loop, loop[:1]])
    return loop / np.sum(np.linalg.norm(np.diff(loop, axis=0), axis=1))


def _offset_polyline(xy: np.ndarray, offset: float) -> np.ndarray:
    tan = np.gradient(xy, axis=0)
    tan /= np.linalg.norm(tan, axis=1, keepdims=True)
    normal = np.stack([-tan[:, 1], tan[:, 0]], axis=1)
    return xy + offset * normal


def _route(cfg: SceneConfig) -> np.ndarray:
    """Dense (n, 3) polyline at sensor height; the figure-eight or out-and-back run."""
    h = cfg.sensor_height
    if cfg.layout == "town":
        laps = max(cfg.laps, 1)
        lap = _figure_eight() * (cfg.track_length / laps)
        xy = [lap if i % 2 == 0 else _offset_polyline(lap, cfg.lane_offset) for i in range(laps)]
        # stitch laps through a short lane change
        xy = np.concatenate([xy[0]] + [p[1:] for p in xy[1:]])
        xy *= cfg.track_length / np.sum(np.linalg.norm(np.diff(xy, axis=0), axis=1))
    elif cfg.layout == "corridor":
        half = cfg.track_length / 2
        x0 = 1.0
        out = np.linspace(x0, x0 + half, 2000)
        xy = np.concatenate([
            np.stack([out, np.full_like(out, 0.25)], axis=1),
            np.stack([out[::-1], np.full_like(out, -0.25)], axis=1)[1:],
        ])
    else:
        ang = np.linspace(0, 2 * np.pi, 400)
        xy = np.stack([np.cos(ang), np.sin(ang)], axis=1) * min(1.0, cfg.world_extent / 8)
    return np.column_stack([xy, np.full(len(xy), h)])


def _plate(center, normal_axis, width, height, thickness=0.04):
    half = np.array([width / 2, width / 2, height / 2])
    half[normal_axis] = thickness / 2
    c = np.asarray(center, dtype=np.float64)
    return c - half, c + half


class _Builder:
    def __init__(self):
        self.mins, self.maxs, self.rs, self.kinds = [], [], [], []

    def add(self, lo, hi, r, kind) -> int:
        self.mins.append(np.asarray(lo, dtype=np.float64))
        self.maxs.append(np.asarray(hi, dtype=np.float64))
        self.rs.append(float(r))
        self.kinds.append(kind)
        return len(self.mins) - 1

    def arrays(self):
        if not self.mins:
            return np.empty((0, 3)), np.empty((0, 3)), np.empty(0), np.empty(0, dtype=np.int64)
        return np.array(self.mins), np.array(self.maxs), np.array(self.rs), np.array(self.kinds, dtype=np.int64)


def generate_scene(cfg: SceneConfig) -> Scene:
    rng = _rng(cfg.seed, _SCENE_STREAM)
    path = _route(cfg)
    build = _Builder()
    markers: list[Marker] = []
    ground_r = float(_surface_r(rng, cfg.background_reflectivity))
    if cfg.layout == "town":
        _town(cfg, rng, path, build, markers)
    elif cfg.layout == "corridor":
        _corridor(cfg, rng, path, build, markers)
    else:
        _room(cfg, rng, build, markers)
    bmin, bmax, br, kind = build.arrays()
    return Scene(cfg, bmin, bmax, br, kind, ground_r, markers, path)


def _town(cfg, rng, path, build, markers):
    ext = cfg.world_extent / 2
    xy = path[::10, :2]
    placed, attempts = 0, 0
    while placed < cfg.num_walls and attempts < 200 * max(cfg.num_walls, 1):
        attempts += 1
        c = rng.uniform(-ext, ext, 2)
        half = rng.uniform(3.0, 10.0, 2)
        lo = np.array([*(c - half), 0.0])
        hi = np.array([*(c + half), rng.uniform(5.0, 15.0)])
        if _box_distance(xy, lo, hi).min() < cfg.clearance:
            continue
        build.add(lo, hi, _surface_r(rng, cfg.background_reflectivity), KIND_BUILDING)
        placed += 1
    bmin, bmax, _, _ = build.arrays()
    route = path[: len(path) // max(cfg.laps, 1)]
    tan = np.gradient(route[:, :2], axis=0)
    tan /= np.linalg.norm(tan, axis=1, keepdims=True)
    normals = np.stack([-tan[:, 1], tan[:, 0]], axis=1)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(route[:, :2], axis=0), axis=1))])
    while len(markers) < cfg.num_markers:
        # one marker per equal share of lap length, so coverage has no long gaps
        slot = len(markers)
        s = (slot + rng.random()) * arc[-1] / cfg.num_markers
        i = min(int(np.searchsorted(arc, s)), len(route) - 1)
        side = 1.0 if rng.random() < 0.5 else -1.0
        n2 = side * normals[i]
        w, h = rng.uniform(*cfg.marker_size, 2)
        z = rng.uniform(0.8, 4.0)
        r = float(_surface_r(rng, cfg.marker_reflectivity))
        o = np.array([route[i, 0], route[i, 1], z])
        t, b = ray_boxes(o, np.array([[n2[0], n2[1], 0.0]]), bmin, bmax)
        if b[0] >= 0 and t[0] < 25.0 and rng.random() < 0.6:
            hit = o + t[0] * np.array([n2[0], n2[1], 0.0])
            # face normal: the axis along which the hit point sits on the box boundary
            dist = np.minimum(np.abs(hit - bmin[b[0]]), np.abs(hit - bmax[b[0]]))[:2]
            axis = int(np.argmin(dist))
            sign = -1.0 if abs(hit[axis] - bmin[b[0]][axis]) < abs(hit[axis] - bmax[b[0]][axis]) else 1.0
            center = hit.copy()
            center[axis] += sign * 0.02
            kind = "wall"
        else:
            base = route[i, :2] + n2 * (cfg.clearance - 1.5)
            if np.linalg.norm(path[:, :2] - base, axis=1).min() < 3.0:
                continue  # would stand in the other road where the routes cross; redraw this slot
            build.add([base[0] - 0.06, base[1] - 0.06, 0.0], [base[0] + 0.06, base[1] + 0.06, z + h / 2 + 0.3],
                      _surface_r(rng, cfg.background_reflectivity), KIND_POLE)
            axis = int(np.argmax(np.abs(n2)))
            center = np.array([base[0], base[1], z])
            kind = "pole"
            if cfg.pole_marker == "sleeve":
                w = w / 2  # square band; looks alike from every heading
                half = np.array([w / 2, w / 2, h / 2])
                bi = build.add(center - half, center + half, r, KIND_MARKER)
                markers.append(Marker(len(markers), kind, tuple(float(v) for v in center), float(w), float(h),
                                      axis, r, bi))
                continue
            center[axis] -= np.sign(n2[axis]) * 0.08  # plate on the road side of the pole
        lo, hi = _plate(center, axis, w, h)
        bi = build.add(lo, hi, r, KIND_MARKER)
        markers.append(Marker(len(markers), kind, tuple(float(v) for v in center), float(w), float(h), axis, r, bi))


def _corridor(cfg, rng, path, build, markers):
    half = cfg.track_length / 2
    x_lo, x_hi = -1.0, half + 3.0
    y = cfg.corridor_width / 2
    height = cfg.corridor_height
    wall_r = _surface_r(rng, cfg.background_reflectivity)
    build.add([x_lo - 0.3, -y - 0.3, 0.0], [x_hi + 0.3, -y, height], wall_r, KIND_WALL)
    build.add([x_lo - 0.3, y, 0.0], [x_hi + 0.3, y + 0.3, height], wall_r, KIND_WALL)
    build.add([x_lo - 0.3, -y - 0.3, height], [x_hi + 0.3, y + 0.3, height + 0.2], wall_r, KIND_WALL)
    build.add([x_lo - 0.3, -y, 0.0], [x_lo, y, height], wall_r, KIND_WALL)
    build.add([x_hi, -y, 0.0], [x_hi + 0.3, y, height], wall_r, KIND_WALL)
    # identical bays: pillar pairs and door recess frames at a fixed pitch
    pillar_r = _surface_r(rng, cfg.background_reflectivity)
    x = 0.0
    bays = 0
    while x < x_hi and (cfg.num_walls == 0 or bays < cfg.num_walls):
        for s in (-1.0, 1.0):
            lo = [x - 0.2, min(s * y, s * (y - 0.35)), 0.0]
            hi = [x + 0.2, max(s * y, s * (y - 0.35)), height]
            build.add(lo, hi, pillar_r, KIND_WALL)
        x += cfg.bay_spacing
        bays += 1
    while len(markers) < cfg.num_markers:
        s = 1.0 if rng.random() < 0.5 else -1.0
        mx = rng.uniform(0.5, half + 2.0)
        if abs((mx + cfg.bay_spacing / 2) % cfg.bay_spacing - cfg.bay_spacing / 2) < 0.8:
            continue  # keep plates off the pillars
        w, h = rng.uniform(*cfg.marker_size, 2)
        z = rng.uniform(0.5, height - 0.5)
        r = float(_surface_r(rng, cfg.marker_reflectivity))
        center = np.array([mx, s * (y - 0.02), z])
        lo, hi = _plate(center, 1, w, h)
        bi = build.add(lo, hi, r, KIND_MARKER)
        markers.append(Marker(len(markers), "wall", tuple(float(v) for v in center), float(w), float(h), 1, r, bi))


def _room(cfg, rng, build, markers):
    e = max(cfg.world_extent / 2, 4.0)
    walls = [
        ([e, -e, 0.0], [e + 0.3, e, 4.0]),
        ([-e, e, 0.0], [e, e + 0.3, 4.0]),
        ([-e - 0.3, -e, 0.0], [-e, e, 4.0]),
        ([-e, -e - 0.3, 0.0], [e, -e, 4.0]),
    ]
    for lo, hi in walls[: max(1, min(cfg.num_walls, 4))]:
        build.add(lo, hi, _surface_r(rng, cfg.background_reflectivity), KIND_WALL)
    for m in range(cfg.num_markers):
        w, h = rng.uniform(*cfg.marker_size, 2)
        center = np.array([e - 0.02, rng.uniform(-e + 1, e - 1), rng.uniform(0.8, 3.0)])
        r = float(_surface_r(rng, cfg.marker_reflectivity))
        lo, hi = _plate(center, 0, w, h)
        bi = build.add(lo, hi, r, KIND_MARKER)
        markers.append(Marker(m, "wall", tuple(float(v) for v in center), float(w), float(h), 0, r, bi))


# -- rendering -----------------------------------------------------------------------

def render_scan(scene: Scene, pose: RigidTransform, model: ScanModel | None = None,
                cfg: SceneConfig | None = None, index: int = 0, frame_id: int | None = None) -> PointCloud:
    """Ray-cast one organized scan from ``pose`` (sensor in world).

    Returned values are rounded to float32 precision, matching the on-disk
    format. ``index`` selects the noise/clutter stream.
    """
    model = model or ScanModel()
    cfg = cfg or scene.config
    rng = _rng(cfg.seed, _SCAN_STREAM, index)
    dirs_s = model.directions().reshape(-1, 3)
    dirs = dirs_s @ pose.rotation.T
    origin = np.asarray(pose.translation, dtype=np.float64)

    near = _boxes_in_range(scene, origin, model.max_range)
    if abs(pose.rotation[2, 2] - 1.0) < 1e-12:
        t, b = _cast_yaw_only(origin, dirs, pose.rotation, scene.box_min[near], scene.box_max[near], model)
    else:
        t, b = ray_boxes(origin, dirs, scene.box_min[near], scene.box_max[near])
    refl = np.where(b >= 0, scene.box_r[near][np.maximum(b, 0)], 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
    ground = tg < t
    t = np.where(ground, tg, t)
    refl = np.where(ground, scene.ground_r, refl)
    hit = t <= model.max_range

    if cfg.dynamic_ratio > 0:
        _inject_clutter(rng, cfg, origin, dirs, t, refl, hit)

    n = model.rings * model.points_per_ring
    ring = np.repeat(np.arange(model.rings), model.points_per_ring)
    keep = np.flatnonzero(hit)
    xyz = t[keep, None] * dirs_s[keep]
    if cfg.noise_sigma_xyz > 0:
        xyz = xyz + rng.normal(0.0, cfg.noise_sigma_xyz, xyz.shape)
    r = refl[keep]
    if cfg.noise_sigma_r > 0:
        r = r + rng.normal(0.0, cfg.noise_sigma_r, len(r))
    r = np.clip(r, 0.0, 255.0)
    assert len(ring) == n
    return PointCloud(
        xyz.astype(np.float32).astype(np.float64),
        r.astype(np.float32).astype(np.float64),
        ring[keep],
        model.rings,
        index if frame_id is None else frame_id,
    )


def _cast_yaw_only(origin, dirs, rot, bmin, bmax, model):
    """``ray_boxes`` for a level sensor: each box only meets the beams inside its azimuth sector."""
    n_az = model.points_per_ring
    m = len(dirs)
    best_t = np.full(m, np.inf)
    best_b = np.full(m, -1, dtype=np.int64)
    yaw = math.atan2(rot[1, 0], rot[0, 0])
    step = 2 * np.pi / n_az
    ring_base = (np.arange(model.rings) * n_az)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for k in range(len(bmin)):
        lo, hi = bmin[k], bmax[k]
        if lo[0] <= origin[0] <= hi[0] and lo[1] <= origin[1] <= hi[1]:
            idx = np.arange(m)
        else:
            cx = np.array([lo[0], hi[0], lo[0], hi[0]]) - origin[0]
            cy = np.array([lo[1], lo[1], hi[1], hi[1]]) - origin[1]
            ang = np.arctan2(cy, cx) - yaw
            ref = ang[0]
            rel = (ang - ref + np.pi) % (2 * np.pi) - np.pi
            a0 = int(math.floor((ref + rel.min()) / step)) - 1
            a1 = int(math.ceil((ref + rel.max()) / step)) + 1
            cols = np.arange(a0, a1 + 1) % n_az
            idx = (ring_base + cols[None, :]).reshape(-1)
        d_inv = inv[idx]
        with np.errstate(invalid="ignore"):  # 0 * inf on a slab plane: NaN, skipped by nanmax/nanmin
            t1 = (lo - origin) * d_inv
            t2 = (hi - origin) * d_inv
        tn = np.nanmax(np.minimum(t1, t2), axis=1)
        tf = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tf >= tn) & (tn > 1e-9) & (tn < best_t[idx])
        sel = idx[hit]
        best_t[sel] = tn[hit]
        best_b[sel] = k
    return best_t, best_b


def _boxes_in_range(scene: Scene, origin, max_range):
    if len(scene.box_min) == 0:
        return np.empty(0, dtype=np.int64)
    d = np.maximum(np.maximum(scene.box_min - origin, origin - scene.box_max), 0.0)
    return np.flatnonzero(np.linalg.norm(d, axis=1) <= max_range)


def _inject_clutter(rng, cfg, origin, dirs, t, refl, hit):
    """Drop transient spheres (people, vehicles) in front of the sensor until they
    account for ``dynamic_ratio`` of the returns."""
    target = cfg.dynamic_ratio * max(int(hit.sum()), 1)
    clutter = np.zeros(len(t), dtype=bool)
    for _ in range(400):
        if clutter.sum() >= target:
            break
        rad = rng.uniform(0.4, 1.2)
        dist = rng.uniform(3.0, 18.0)
        az = rng.uniform(0, 2 * np.pi)
        c = origin + np.array([dist * np.cos(az), dist * np.sin(az), 0.0])
        c[2] = rad
        r_val = float(_surface_r(rng, cfg.clutter_reflectivity or cfg.background_reflectivity))
        oc = origin - c
        bq = dirs @ oc
        disc = bq * bq - (oc @ oc - rad * rad)
        ok = disc >= 0
        ts = np.where(ok, -bq - np.sqrt(np.where(ok, disc, 0.0)), np.inf)
        closer = ok & (ts > 1e-9) & (ts < np.where(hit, t, np.inf))
        t[closer] = ts[closer]
        refl[closer] = r_val
        hit[closer] = True
        clutter |= closer
    return clutter


# -- trajectories and benchmarks -------------------------------------------------------

def make_trajectory(scene: Scene, spacing: float) -> Trajectory:
    """Sample the scene route every ``spacing`` metres of arc length; heading follows the tangent."""
    pts, s = _resample(scene.path, spacing)
    tan = np.gradient(pts[:, :2], axis=0) if len(pts) > 1 else np.array([[1.0, 0.0]])
    yaw = np.arctan2(tan[:, 1], tan[:, 0])
    poses = tuple(
        RigidTransform(Rotation.from_euler("z", a).as_matrix(), p.copy()) for a, p in zip(yaw, pts)
    )
    return Trajectory(poses, s)


def make_benchmark(scene: Scene, trajectory: Trajectory, model: ScanModel | None, cfg: SceneConfig | None,
                   out_dir, env: str = "outdoor", spacing: float | None = None, workers: int = 1):
    """Render every trajectory pose to ``out_dir`` and write ``poses.csv``,
    ``markers.csv`` and ``benchmark.json``. Returns ``[(scan path, pose row), ...]``."""
    model = model or ScanModel()
    cfg = cfg or scene.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scans").mkdir(exist_ok=True)
    jobs = list(range(len(trajectory)))

    def render(i):
        path = out / "scans" / f"{i:06d}.rtrp"
        save_scan(render_scan(scene, trajectory.poses[i], model, cfg, index=i, frame_id=i), path)
        return path

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            paths = list(ex.map(render, jobs))
    else:
        paths = [render(i) for i in jobs]

    rows = []
    with open(out / "poses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "x", "y", "z", "qx", "qy", "qz", "qw", "arclen"])
        for i, pose in enumerate(trajectory.poses):
            q = Rotation.from_matrix(pose.rotation).as_quat()
            row = [i, *pose.translation.tolist(), *q.tolist(), float(trajectory.arclen[i])]
            w.writerow([i] + [repr(float(v)) for v in row[1:]])
            rows.append(row)
    write_markers(scene, out / "markers.csv")
    meta = {
        "env": env,
        "spacing": spacing,
        "frames": len(trajectory),
        "scene": dataclasses.asdict(cfg),
        "model": dataclasses.asdict(model),
    }
    (out / "benchmark.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return list(zip(paths, rows))


def write_markers(scene: Scene, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "kind", "cx", "cy", "cz", "width", "height", "axis", "reflectivity"])
        for m in scene.markers:
            w.writerow([m.id, m.kind, *(repr(v) for v in m.center), repr(m.width), repr(m.height), m.axis,
                        repr(m.reflectivity)])


# -- presets ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Preset:
    scene: SceneConfig
    env: str
    spacing: float
    model: ScanModel = ScanModel()


PRESETS: dict[str, Preset] = {
    "town": Preset(SceneConfig(layout="town", num_markers=30, track_length=500.0, laps=2, dynamic_ratio=0.2,
                               lane_offset=0.5, clearance=9.0, marker_size=(0.6, 1.0), pole_marker="sleeve"),
                   "outdoor", 0.25),
    "corridor": Preset(
        SceneConfig(layout="corridor", num_markers=24, num_walls=0, track_length=120.0, dynamic_ratio=0.05,
                    sensor_height=1.3, marker_size=(0.3, 0.6), world_extent=70.0),
        "indoor", 0.1),
    "room": Preset(SceneConfig(layout="room", num_markers=4, num_walls=3, world_extent=16.0, dynamic_ratio=0.0,
                               laps=1, track_length=10.0), "indoor", 0.1),
}


def preset(name: str, **overrides) -> Preset:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    if overrides:
        p = dataclasses.replace(p, scene=dataclasses.replace(p.scene, **overrides))
    return p


def synthesize(name: str, out_dir, seed: int | None = None, workers: int = 1, **overrides):
    """Generate a named preset benchmark into ``out_dir``."""
    if seed is not None:
        overrides["seed"] = seed
    p = preset(name, **overrides)
    scene = generate_scene(p.scene)
    traj = make_trajectory(scene, p.spacing)
    return make_benchmark(scene, traj, p.model, p.scene, out_dir, env=p.env, spacing=p.spacing, workers=workers)

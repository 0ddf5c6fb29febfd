"""Geometric loop verification: voxel planes with reflectivity layers, rigid
transform estimation from descriptor correspondences, plane coincidence."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .scan_io import PointCloud, ReflectivityStats

NUM_LAYERS = 5


class TransformError(ValueError):
    """Correspondences do not determine a rigid transform."""


@dataclass(frozen=True)
class VerifyConfig:
    voxel_size: float = 1.0
    planarity_ratio: float = 0.1
    min_voxel_points: int = 10
    z_l: float = 1.0
    sigma_n: float = 0.2
    sigma_d: float = 0.3
    sigma_lambda: int = 3
    accept_threshold: float = 0.3
    # max vertex residual (m) for a descriptor pair to join the consensus set; None fits all pairs
    consensus_tol: float | None = 0.5
    max_hypotheses: int = 64
    # fewest matched descriptor pairs worth verifying; one pair already fixes a transform
    min_votes: int = 1
    sigma_floor: float = 1e-6

    def __post_init__(self):
        if min(self.voxel_size, self.planarity_ratio, self.z_l, self.sigma_n, self.sigma_d) <= 0:
            raise ValueError("voxel_size, planarity_ratio, z_l, sigma_n, sigma_d must be positive")
        if self.min_voxel_points < 3:
            raise ValueError("min_voxel_points must be >= 3")
        if int(self.sigma_lambda) != self.sigma_lambda or self.sigma_lambda < 0:
            raise ValueError("sigma_lambda must be a non-negative integer")
        if not 0 <= self.accept_threshold <= 1:
            raise ValueError("accept_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class Plane:
    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    layer: int
    support: int


class PlaneArray:
    """Planes of one frame as columns: ``centers``, ``normals`` (m, 3), ``layers``, ``support`` (m,)."""

    __slots__ = ("centers", "normals", "layers", "support")

    def __init__(self, centers, normals, layers, support):
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        m = len(self.centers)
        self.normals = np.asarray(normals, dtype=np.float64).reshape(m, 3)
        self.layers = np.asarray(layers, dtype=np.int64).reshape(m)
        self.support = np.asarray(support, dtype=np.int64).reshape(m)

    @classmethod
    def empty(cls) -> "PlaneArray":
        return cls(np.empty((0, 3)), np.empty((0, 3)), np.empty(0), np.empty(0))

    @classmethod
    def from_planes(cls, planes) -> "PlaneArray":
        if isinstance(planes, PlaneArray):
            return planes
        planes = list(planes)
        if not planes:
            return cls.empty()
        return cls([p.center for p in planes], [p.normal for p in planes],
                   [p.layer for p in planes], [p.support for p in planes])

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, i) -> Plane:
        return Plane(tuple(self.centers[i].tolist()), tuple(self.normals[i].tolist()),
                     int(self.layers[i]), int(self.support[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, PlaneArray):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self.__slots__)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def params(self) -> list[float]:
        """Row-major rotation followed by translation (12 numbers)."""
        return [float(v) for v in self.rotation.reshape(-1)] + [float(v) for v in self.translation]


@dataclass(frozen=True)
class VerifyResult:
    accepted: bool
    coincidence: float
    transform: RigidTransform
    matched_plane_pairs: int
    frame_id: int = -1
    inlier_pairs: int = 0


def assign_layer(mu_r_v, stats: ReflectivityStats, z_l: float, sigma_floor: float = 1e-6):
    """Reflectivity layer in [0, 4]: how many steps of ``stddev * z_l`` the mean exceeds the scan mean."""
    mu = np.asarray(mu_r_v, dtype=np.float64)
    if stats.stddev < sigma_floor:
        out = np.zeros(mu.shape, dtype=np.int64)
    else:
        out = np.clip(np.floor((mu - stats.mean) / (stats.stddev * z_l)), 0, NUM_LAYERS - 1).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def extract_planes(cloud: PointCloud, stats: ReflectivityStats, cfg: VerifyConfig) -> PlaneArray:
    """Planar patches from an axis-aligned voxel grid.

    A voxel with enough points is planar when its smallest covariance eigenvalue
    is at most ``planarity_ratio`` times the middle one. Normals point toward
    the sensor origin. Voxels come out in ascending voxel-index order.
    """
    if len(cloud) == 0:
        return PlaneArray.empty()
    xyz = cloud.xyz
    vox = np.floor(xyz / cfg.voxel_size).astype(np.int64)
    vmin = vox.min(axis=0)
    span = vox.max(axis=0) - vmin + 1
    flat = np.ravel_multi_index((vox - vmin).T, span)
    uniq, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
    good = counts >= cfg.min_voxel_points
    if not good.any():
        return PlaneArray.empty()
    m = len(uniq)
    local = xyz - vox * cfg.voxel_size  # small offsets keep the moments well conditioned
    cnt = counts.astype(np.float64)
    s = np.stack([np.bincount(inv, local[:, a], m) for a in range(3)], axis=1) / cnt[:, None]
    pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    mom = {p: np.bincount(inv, local[:, p[0]] * local[:, p[1]], m) / cnt for p in pairs}
    sel = np.flatnonzero(good)
    cov = np.empty((len(sel), 3, 3))
    for a, b in pairs:
        c = mom[(a, b)][sel] - s[sel, a] * s[sel, b]
        cov[:, a, b] = c
        cov[:, b, a] = c
    evals, evecs = np.linalg.eigh(cov)
    planar = (evals[:, 0] <= cfg.planarity_ratio * evals[:, 1]) & (evals[:, 1] > 1e-10)
    sel, evecs = sel[planar], evecs[planar]
    if len(sel) == 0:
        return PlaneArray.empty()
    vidx = np.stack(np.unravel_index(uniq[sel], span), axis=1) + vmin
    centers = s[sel] + vidx * cfg.voxel_size
    normals = evecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", normals, -centers) < 0
    normals[flip] *= -1
    mu_r = np.bincount(inv, cloud.r, m)[sel] / cnt[sel]
    layers = assign_layer(mu_r, stats, cfg.z_l, cfg.sigma_floor)
    return PlaneArray(centers, normals, np.atleast_1d(layers), counts[sel])


def _kabsch(q: np.ndarray, r: np.ndarray):
    """Batched least-squares rotation/translation mapping ``q`` onto ``r``; shapes (..., n, 3)."""
    qc = q.mean(axis=-2, keepdims=True)
    rc = r.mean(axis=-2, keepdims=True)
    h = np.swapaxes(q - qc, -1, -2) @ (r - rc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.swapaxes(vt, -1, -2) @ np.swapaxes(u, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    fix = np.ones(h.shape[:-2] + (3,))
    fix[..., 2] = d
    rot = np.swapaxes(vt, -1, -2) @ (fix[..., :, None] * np.swapaxes(u, -1, -2))
    t = rc[..., 0, :] - (rot @ qc[..., 0, :, None])[..., 0]
    return rot, t


def estimate_transform(query_points, reference_points) -> RigidTransform:
    """Least-squares rigid transform taking query points onto reference points (SVD).

    Raises ``TransformError`` for fewer than three pairs or a collinear query set.
    """
    q = np.asarray(query_points, dtype=np.float64).reshape(-1, 3)
    r = np.asarray(reference_points, dtype=np.float64).reshape(-1, 3)
    if len(q) != len(r):
        raise ValueError("point sets differ in length")
    if len(q) < 3:
        raise TransformError(f"need at least 3 correspondences, got {len(q)}")
    sv = np.linalg.svd(q - q.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise TransformError("correspondences are collinear")
    rot, t = _kabsch(q, r)
    return RigidTransform(rot, t)


def plane_coincidence(planes_q, planes_r, transform: RigidTransform, cfg: VerifyConfig) -> tuple[float, int]:
    """Fraction (and count) of query planes that land on their nearest reference plane.

    A transformed query plane coincides with the reference plane whose center is
    closest when the normals agree up to sign within ``sigma_n``, the
    point-to-plane offset is below ``sigma_d`` and the layers differ by less
    than ``sigma_lambda``.
    """
    pq = PlaneArray.from_planes(planes_q)
    pr = PlaneArray.from_planes(planes_r)
    if len(pq) == 0 or len(pr) == 0:
        return 0.0, 0
    cq = transform.apply(pq.centers)
    nq = transform.rotate(pq.normals)
    _, j = cKDTree(pr.centers).query(cq, k=1)
    nr = pr.normals[j]
    normal_err = np.minimum(np.linalg.norm(nq - nr, axis=1), np.linalg.norm(nq + nr, axis=1))
    offset = np.abs(np.einsum("ij,ij->i", nr, cq - pr.centers[j]))
    layer_gap = np.abs(pq.layers - pr.layers[j])
    ok = (normal_err < cfg.sigma_n) & (offset < cfg.sigma_d) & (layer_gap < cfg.sigma_lambda)
    hits = int(ok.sum())
    return hits / len(pq), hits


def consensus_pairs(qv: np.ndarray, rv: np.ndarray, tol: float, max_hypotheses: int) -> np.ndarray:
    """Indices of descriptor pairs agreeing with the best single-pair hypothesis.

    ``qv`` and ``rv`` are (n, 3, 3) vertex centroids of matched query/stored
    descriptors. Each hypothesis is the transform of one pair; a pair supports
    it when all three vertices land within ``tol``.
    """
    n = len(qv)
    step = max(1, math.ceil(n / max_hypotheses))
    hyp = np.arange(0, n, step)
    rot, t = _kabsch(qv[hyp], rv[hyp])
    moved = np.einsum("hab,nvb->hnva", rot, qv) + t[:, None, None, :]
    resid = np.linalg.norm(moved - rv[None], axis=-1).max(axis=-1)  # (h, n)
    support = resid <= tol
    best = int(np.argmax(support.sum(axis=1)))
    return np.flatnonzero(support[best])


def verify_loop(db, candidate, query_planes, cfg: VerifyConfig) -> VerifyResult:
    """Estimate the candidate's relative pose from its matched descriptors and score plane coincidence."""
    reject = VerifyResult(False, 0.0, RigidTransform.identity(), 0, candidate.frame_id, 0)
    if candidate.votes < max(1, cfg.min_votes):
        return reject
    qv = candidate.query_vertices
    rv = candidate.stored.vertices
    if cfg.consensus_tol is not None:
        keep = consensus_pairs(qv, rv, cfg.consensus_tol, cfg.max_hypotheses)
        if len(keep) == 0:
            return reject
        qv, rv = qv[keep], rv[keep]
    try:
        transform = estimate_transform(qv.reshape(-1, 3), rv.reshape(-1, 3))
    except TransformError:
        return reject
    ref_planes = db.frame(candidate.frame_id).planes
    score, hits = plane_coincidence(query_planes, ref_planes, transform, cfg)
    return VerifyResult(score >= cfg.accept_threshold, score, transform, hits, candidate.frame_id, len(qv))

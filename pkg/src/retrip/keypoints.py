"""Reflectivity keypoints: absolute (scan-level z-score) and relative (ring-local contrast)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scan_io import PointCloud, ReflectivityStats, reflectivity_stats

ARP, RRP, REM = "ARP", "RRP", "REM"


@dataclass(frozen=True)
class KeypointConfig:
    z_a: float = 4.5
    delta_r: float = 400.0
    window: int = 3
    sigma_floor: float = 1e-6

    def __post_init__(self):
        if self.z_a <= 0 or self.delta_r <= 0 or self.sigma_floor <= 0:
            raise ValueError("z_a, delta_r and sigma_floor must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass(frozen=True)
class KeypointPartition:
    arp: np.ndarray
    rrp: np.ndarray
    remainder: np.ndarray

    def labels(self, n: int) -> np.ndarray:
        out = np.full(n, REM, dtype=object)
        out[self.arp] = ARP
        out[self.rrp] = RRP
        return out


def extract_arp(cloud: PointCloud, stats: ReflectivityStats, cfg: KeypointConfig) -> np.ndarray:
    """Indices whose reflectivity z-score strictly exceeds ``cfg.z_a``."""
    if stats.stddev < cfg.sigma_floor:
        return np.empty(0, dtype=np.int64)
    z = (cloud.r - stats.mean) / stats.stddev
    return np.flatnonzero(z > cfg.z_a)


def local_variation(cloud: PointCloud, i: int, window: int) -> float:
    """Mean squared reflectivity difference between point ``i`` and its ring neighbours.

    The neighbourhood is up to ``window`` points on either side of ``i`` in scan
    order, truncated at the ends of the ring. A lone point scores 0.
    """
    order = cloud.ring_order
    pos = int(np.flatnonzero(order == i)[0])
    ring = cloud.ring[i]
    lo = max(pos - window, 0)
    hi = min(pos + window, len(order) - 1)
    nbrs = [order[j] for j in range(lo, hi + 1) if j != pos and cloud.ring[order[j]] == ring]
    if not nbrs:
        return 0.0
    return float(np.mean((cloud.r[i] - cloud.r[nbrs]) ** 2))


def local_variation_all(cloud: PointCloud, window: int) -> np.ndarray:
    """``local_variation`` for every point at once."""
    n = len(cloud)
    out = np.zeros(n)
    if n == 0:
        return out
    order = cloud.ring_order
    r = cloud.r[order]
    ring = cloud.ring[order]
    total = np.zeros(n)
    count = np.zeros(n)
    for d in range(1, window + 1):
        if d >= n:
            break
        same = ring[d:] == ring[:-d]
        sq = np.where(same, (r[d:] - r[:-d]) ** 2, 0.0)
        # pair (k, k+d) feeds both endpoints
        total[:-d] += sq
        total[d:] += sq
        count[:-d] += same
        count[d:] += same
    vals = np.divide(total, count, out=np.zeros(n), where=count > 0)
    out[order] = vals
    return out


def extract_keypoints(
    cloud: PointCloud, cfg: KeypointConfig, stats: ReflectivityStats | None = None
) -> KeypointPartition:
    """Split points into ARP, RRP and the remainder; ARP wins when both tests pass."""
    if stats is None:
        stats = reflectivity_stats(cloud)
    n = len(cloud)
    arp = extract_arp(cloud, stats, cfg)
    is_arp = np.zeros(n, dtype=bool)
    is_arp[arp] = True
    is_rrp = (local_variation_all(cloud, cfg.window) > cfg.delta_r) & ~is_arp
    rrp = np.flatnonzero(is_rrp)
    rem = np.flatnonzero(~is_arp & ~is_rrp)
    return KeypointPartition(arp=arp, rrp=rrp, remainder=rem)

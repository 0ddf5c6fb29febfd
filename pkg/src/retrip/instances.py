"""Keypoint clustering and key-instance selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .keypoints import KeypointPartition
from .scan_io import PointCloud

LABEL_ARP = 1
LABEL_RRP = 0


@dataclass(frozen=True)
class ClusterConfig:
    radius: float = 0.5
    min_cluster_size: int = 5
    max_cluster_size: int = 10000
    k: int = 20

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not 1 <= self.min_cluster_size <= self.max_cluster_size:
            raise ValueError("need 1 <= min_cluster_size <= max_cluster_size")
        if self.k < 3:
            raise ValueError("k must be >= 3")


@dataclass(frozen=True, eq=False)
class Cluster:
    members: np.ndarray  # sorted point indices
    source: int  # LABEL_ARP or LABEL_RRP


@dataclass(frozen=True)
class Instance:
    centroid: tuple[float, float, float]
    label: int
    size: int
    first_index: int = 0

    @property
    def position(self) -> np.ndarray:
        return np.array(self.centroid)


@dataclass(frozen=True)
class KeyInstanceSet:
    instances: tuple[Instance, ...]
    frame_id: int = 0

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]

    @property
    def centroids(self) -> np.ndarray:
        return np.array([i.centroid for i in self.instances], dtype=np.float64).reshape(-1, 3)

    @property
    def labels(self) -> np.ndarray:
        return np.array([i.label for i in self.instances], dtype=np.int8)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([i.size for i in self.instances], dtype=np.int64)


def euclidean_cluster(cloud: PointCloud, indices, cfg: ClusterConfig, source: int = LABEL_ARP) -> list[Cluster]:
    """Connected components of the radius graph (edge iff distance <= radius) over ``indices``.

    Components outside ``[min_cluster_size, max_cluster_size]`` are dropped.
    Clusters come back ordered by their smallest member index.
    """
    idx = np.unique(np.asarray(indices, dtype=np.int64))
    if len(idx) == 0:
        return []
    pts = cloud.xyz[idx]
    pairs = cKDTree(pts).query_pairs(cfg.radius, output_type="ndarray")
    n = len(idx)
    graph = coo_matrix((np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    order = np.argsort(comp, kind="stable")
    bounds = np.flatnonzero(np.diff(comp[order])) + 1
    clusters = []
    for group in np.split(order, bounds):
        if cfg.min_cluster_size <= len(group) <= cfg.max_cluster_size:
            clusters.append(Cluster(members=idx[np.sort(group)], source=source))
    clusters.sort(key=lambda c: int(c.members[0]))
    return clusters


def make_instances(cloud: PointCloud, clusters: list[Cluster]) -> list[Instance]:
    out = []
    for c in clusters:
        mu = cloud.xyz[c.members].mean(axis=0)
        out.append(Instance(tuple(float(v) for v in mu), c.source, len(c.members), int(c.members[0])))
    return out


def _rank_key(inst: Instance):
    return (-inst.size, float(np.linalg.norm(inst.centroid)), inst.first_index)


def build_key_instance_set(ari: list[Instance], rri: list[Instance], k: int, frame_id: int = 0) -> KeyInstanceSet:
    """Top-``k`` instances by size, absolute-reflectivity instances first."""
    if any(i.label != LABEL_ARP for i in ari) or any(i.label != LABEL_RRP for i in rri):
        raise ValueError("ari must be ARP-labelled and rri RRP-labelled")
    chosen = sorted(ari, key=_rank_key)[:k]
    chosen += sorted(rri, key=_rank_key)[: k - len(chosen)]
    return KeyInstanceSet(tuple(chosen), frame_id)


def segment_instances(cloud: PointCloud, part: KeypointPartition, cfg: ClusterConfig) -> KeyInstanceSet:
    ari = make_instances(cloud, euclidean_cluster(cloud, part.arp, cfg, LABEL_ARP))
    rri = make_instances(cloud, euclidean_cluster(cloud, part.rrp, cfg, LABEL_RRP))
    return build_key_instance_set(ari, rri, cfg.k, cloud.frame_id)

"""Per-frame feature extraction and the streaming retrieve / verify / insert loop."""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .config import PipelineConfig
from .descriptor import DescriptorArray, build_descriptors
from .instances import KeyInstanceSet, segment_instances
from .keypoints import extract_keypoints
from .retrieval import CandidateScore, DescriptorDB
from .scan_io import PointCloud, ReflectivityStats, load_scan, reflectivity_stats
from .verification import PlaneArray, VerifyResult, extract_planes, verify_loop


@dataclass
class FrameFeatures:
    frame_id: int
    stats: ReflectivityStats
    key_set: KeyInstanceSet
    descriptors: DescriptorArray
    planes: PlaneArray
    num_arp: int
    num_rrp: int
    descriptor_ms: float


@dataclass(frozen=True)
class FrameOutcome:
    """Best verified candidate of one query (``predicted`` is None when nothing verified)."""

    frame_id: int
    predicted: int | None
    score: float
    votes: int
    accepted: bool
    num_candidates: int
    retrieve_ms: float
    verify_ms: float


def extract_features(cloud: PointCloud, cfg: PipelineConfig) -> FrameFeatures:
    t0 = time.perf_counter()
    stats = reflectivity_stats(cloud)
    part = extract_keypoints(cloud, cfg.keypoint, stats)
    key_set = segment_instances(cloud, part, cfg.cluster)
    descs = build_descriptors(key_set, cfg.descriptor)
    planes = extract_planes(cloud, stats, cfg.verify)
    ms = (time.perf_counter() - t0) * 1e3
    return FrameFeatures(cloud.frame_id, stats, key_set, descs, planes, len(part.arp), len(part.rrp), ms)


def _extract_path(args) -> FrameFeatures:
    path, frame_id, cfg = args
    return extract_features(load_scan(path, frame_id=frame_id), cfg)


def extract_many(paths, frame_ids, cfg: PipelineConfig, workers: int = 1) -> list[FrameFeatures]:
    """Features for every scan, in input order. Frames are independent, so
    results do not depend on ``workers``."""
    jobs = [(p, f, cfg) for p, f in zip(paths, frame_ids)]
    if workers <= 1 or len(jobs) < 2:
        return [_extract_path(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_extract_path, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def best_verified(results: list[tuple[CandidateScore, VerifyResult]]):
    """Highest coincidence among candidates whose transform could be estimated;
    earlier retrieval rank wins ties."""
    best = None
    for cand, res in results:
        if res.inlier_pairs == 0:
            continue
        if best is None or res.coincidence > best[1].coincidence:
            best = (cand, res)
    return best


class LoopDetector:
    """Streams frames in order: query the database, verify candidates, then insert."""

    def __init__(self, cfg: PipelineConfig, db: DescriptorDB | None = None):
        self.cfg = cfg
        self.db = db if db is not None else DescriptorDB(cfg.descriptor.resolution)

    def query(self, feats: FrameFeatures) -> tuple[list[tuple[CandidateScore, VerifyResult]], float, float]:
        t0 = time.perf_counter()
        cands = self.db.retrieve_candidates(feats.descriptors, self.cfg.match) if len(self.db) else []
        t1 = time.perf_counter()
        results = [(c, verify_loop(self.db, c, feats.planes, self.cfg.verify)) for c in cands]
        t2 = time.perf_counter()
        return results, (t1 - t0) * 1e3, (t2 - t1) * 1e3

    def process(self, feats: FrameFeatures, insert: bool = True) -> FrameOutcome:
        results, rms, vms = self.query(feats)
        if insert:
            self.db.insert_frame(feats.descriptors, feats.key_set, feats.planes)
        best = best_verified(results)
        if best is None:
            return FrameOutcome(feats.frame_id, None, 0.0, 0, False, len(results), rms, vms)
        cand, res = best
        return FrameOutcome(feats.frame_id, cand.frame_id, res.coincidence, cand.votes, res.accepted,
                            len(results), rms, vms)

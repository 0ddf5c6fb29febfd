"""Ground truth from poses, sequence scoring, and precision-recall metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .config import ENV_PRESETS, PipelineConfig
from .pipeline import FrameFeatures, FrameOutcome, LoopDetector, extract_many

AUC_METHOD = "trapezoidal over achieved recall, starting from the (recall 0, precision 1) point"


@dataclass(frozen=True)
class GroundTruth:
    revisits: dict[int, frozenset[int]]
    env: str
    threshold: float
    exclusion: int | None

    def positives(self, queries=None) -> int:
        keys = self.revisits if queries is None else queries
        return sum(1 for q in keys if self.revisits.get(q))

    def is_revisit(self, query: int, frame: int) -> bool:
        return frame in self.revisits.get(query, ())


def read_poses(path) -> tuple[np.ndarray, np.ndarray]:
    """Frame ids and xyz positions from a ``poses.csv`` file."""
    frames, pos = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            frames.append(int(row["frame"]))
            pos.append((float(row["x"]), float(row["y"]), float(row["z"])))
    return np.array(frames, dtype=np.int64), np.array(pos, dtype=np.float64).reshape(-1, 3)


def build_ground_truth(frames, positions, env: str = "outdoor", exclusion: int | None = 100,
                       threshold: float | None = None) -> GroundTruth:
    """Frame j revisits query i iff it lies within the environment's distance
    threshold, is earlier, and is more than ``exclusion`` frames older."""
    frames = np.asarray(frames, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if env not in ENV_PRESETS:
        raise ValueError(f"unknown environment {env!r}")
    if len(frames) != len(positions):
        raise ValueError("frames and positions differ in length")
    if len(frames) > 1 and np.any(np.diff(frames) <= 0):
        raise ValueError("pose frame ids must be strictly increasing (unsorted or duplicate)")
    thr = ENV_PRESETS[env]["gt_threshold"] if threshold is None else float(threshold)
    gap = 0 if exclusion is None else exclusion
    out: dict[int, set[int]] = {int(f): set() for f in frames}
    if len(frames) > 1:
        pairs = cKDTree(positions).query_pairs(thr, output_type="ndarray")
        # query_pairs uses <=; keep the distance test explicit for float agreement with a direct check
        if len(pairs):
            d = np.sqrt(np.sum((positions[pairs[:, 0]] - positions[pairs[:, 1]]) ** 2, axis=1))
            pairs = pairs[d <= thr]
        for a, b in pairs:
            j, i = sorted((int(frames[a]), int(frames[b])))
            if i - j > gap:
                out[i].add(j)
    return GroundTruth({k: frozenset(v) for k, v in out.items()}, env, thr, exclusion)


@dataclass(frozen=True)
class DetectionRecord:
    query: int
    predicted: int | None = None
    score: float | None = None
    votes: int = 0
    accepted: bool = False

    def __post_init__(self):
        if (self.predicted is None) != (self.score is None):
            raise ValueError("score must be present exactly when a frame is predicted")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def pr_curve(records, gt: GroundTruth) -> list[PRPoint]:
    """Sweep the acceptance threshold over every observed score, highest first.

    A prediction scoring at least the threshold is a true positive when the
    predicted frame is a ground-truth revisit of its query. Recall counts
    against every query that has at least one revisit. The first point sits
    above all scores (nothing predicted; precision taken as 1).
    """
    records = list(records)
    positives = gt.positives([r.query for r in records])
    if positives == 0:
        raise ValueError("ground truth has no positives; recall is undefined")
    preds = [(r.score, gt.is_revisit(r.query, r.predicted)) for r in records if r.predicted is not None]
    curve = [PRPoint(math.inf, 1.0, 0.0, 0.0)]
    if not preds:
        return curve
    scores = np.array([s for s, _ in preds])
    correct = np.array([c for _, c in preds])
    order = np.argsort(-scores, kind="stable")
    scores, correct = scores[order], correct[order]
    tp_cum = np.cumsum(correct)
    fp_cum = np.cumsum(~correct)
    # last index of each distinct score: everything up to it is predicted at that threshold
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    for e in ends:
        tp, fp = int(tp_cum[e]), int(fp_cum[e])
        p = tp / (tp + fp)
        r = tp / positives
        curve.append(PRPoint(float(scores[e]), p, r, _f1(p, r), tp, fp))
    return curve


def _positives_of(curve) -> int | None:
    for pt in curve:
        if pt.tp > 0:
            return round(pt.tp / pt.recall)
    return None


def auc(curve) -> float:
    """Trapezoidal area under precision over recall."""
    pts = sorted(curve, key=lambda p: (p.recall, -p.threshold))
    if len(pts) < 2:
        return 0.0
    pos = _positives_of(pts)
    if pos is not None:
        # integrate in true-positive counts so a perfect curve sums to exactly 1
        area = sum((b.tp - a.tp) * (a.precision + b.precision) for a, b in zip(pts, pts[1:]))
        return float(min(1.0, area / (2 * pos)))
    r = np.array([p.recall for p in pts])
    pr = np.array([p.precision for p in pts])
    return float(np.sum(np.diff(r) * (pr[1:] + pr[:-1]) / 2))


def max_f1(curve) -> float:
    return max((p.f1 for p in curve), default=0.0)


def average_precision(curve) -> float:
    """Step-wise sum of precision times recall gained at each threshold."""
    pts = sorted(curve, key=lambda p: (p.recall, -p.threshold))
    pos = _positives_of(pts)
    if pos is None:
        return 0.0
    return float(min(1.0, sum((b.tp - a.tp) * b.precision for a, b in zip(pts, pts[1:])) / pos))


# -- sequence scoring -----------------------------------------------------------

@dataclass
class SequenceResult:
    records: list[DetectionRecord]
    outcomes: list[FrameOutcome]
    descriptor_ms: list[float] = field(default_factory=list)
    db: object = field(default=None, repr=False)

    def timings(self) -> dict[str, float]:
        retrieve = np.array([o.retrieve_ms for o in self.outcomes] or [0.0])
        verify = np.array([o.verify_ms for o in self.outcomes] or [0.0])
        desc = np.array(self.descriptor_ms or [0.0])
        search = retrieve + verify
        return {
            "descriptor_ms": float(desc.mean()),
            "retrieve_ms": float(retrieve.mean()),
            "verify_ms": float(verify.mean()),
            "search_ms": float(search.mean()),
            "total_ms": float(desc.mean() + search.mean()),
        }


def _to_record(o: FrameOutcome) -> DetectionRecord:
    if o.predicted is None:
        return DetectionRecord(o.frame_id)
    return DetectionRecord(o.frame_id, o.predicted, float(min(1.0, max(0.0, o.score))), o.votes, o.accepted)


def score_features(features: list[FrameFeatures], cfg: PipelineConfig) -> SequenceResult:
    """Stream precomputed frame features through retrieval, verification and insertion."""
    det = LoopDetector(cfg)
    records, outcomes = [], []
    for f in features:
        if f is None:
            continue
        try:
            o = det.process(f)
        except Exception:  # a failing frame counts as no detection
            o = FrameOutcome(f.frame_id, None, 0.0, 0, False, 0, 0.0, 0.0)
        outcomes.append(o)
        records.append(_to_record(o))
    return SequenceResult(records, outcomes, [f.descriptor_ms for f in features if f is not None], det.db)


def score_sequence(paths, frame_ids, cfg: PipelineConfig, workers: int = 1) -> SequenceResult:
    """Full pipeline over scans in frame order; feature extraction may run in parallel."""
    return score_features(extract_many(paths, frame_ids, cfg, workers), cfg)


@dataclass(frozen=True)
class Benchmark:
    root: Path
    frames: np.ndarray
    positions: np.ndarray
    env: str

    @classmethod
    def open(cls, root) -> "Benchmark":
        root = Path(root)
        if not (root / "poses.csv").is_file():
            raise FileNotFoundError(f"{root}: no poses.csv")
        frames, pos = read_poses(root / "poses.csv")
        env = "outdoor"
        meta = root / "benchmark.json"
        if meta.is_file():
            env = json.loads(meta.read_text()).get("env", env)
        return cls(root, frames, pos, env)

    def scan_paths(self) -> list[Path]:
        return [self.root / "scans" / f"{int(f):06d}.rtrp" for f in self.frames]


@dataclass
class Evaluation:
    gt: GroundTruth
    result: SequenceResult
    curve: list[PRPoint]

    def summary(self) -> dict[str, object]:
        out: dict[str, object] = {
            "auc": auc(self.curve),
            "max_f1": max_f1(self.curve),
            "average_precision": average_precision(self.curve),
            "queries": len(self.result.records),
            "positives": self.gt.positives([r.query for r in self.result.records]),
            "predictions": sum(r.predicted is not None for r in self.result.records),
            "accepted": sum(r.accepted for r in self.result.records),
        }
        out.update(self.result.timings())
        out["env"] = self.gt.env
        out["gt_threshold"] = self.gt.threshold
        out["auc_method"] = AUC_METHOD
        return out


def evaluate_features(features, gt: GroundTruth, cfg: PipelineConfig) -> Evaluation:
    res = score_features(features, cfg)
    return Evaluation(gt, res, pr_curve(res.records, gt))


def evaluate_benchmark(root, cfg: PipelineConfig, workers: int = 1) -> Evaluation:
    bench = Benchmark.open(root)
    gt = build_ground_truth(bench.frames, bench.positions, cfg.env, cfg.match.exclusion, cfg.gt_threshold)
    feats = extract_many(bench.scan_paths(), bench.frames.tolist(), cfg, workers)
    return evaluate_features(feats, gt, cfg)


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "predicted", "score", "votes", "accepted"])
        for r in records:
            w.writerow([r.query, "" if r.predicted is None else r.predicted,
                        "" if r.score is None else repr(r.score), r.votes, int(r.accepted)])


def read_records(path) -> list[DetectionRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pred = int(row["predicted"]) if row["predicted"] else None
            score = float(row["score"]) if row["score"] else None
            out.append(DetectionRecord(int(row["query"]), pred, score, int(row["votes"]), row["accepted"] == "1"))
    return out


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "f1", "tp", "fp"])
        for p in curve:
            w.writerow([repr(p.threshold), repr(p.precision), repr(p.recall), repr(p.f1), p.tp, p.fp])


def write_summary(summary: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, repr(v) if isinstance(v, float) else v])


def write_evaluation(ev: Evaluation, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(ev.result.records, out / "records.csv")
    write_curve(ev.curve, out / "pr_curve.csv")
    write_summary(ev.summary(), out / "summary.csv")
    return out

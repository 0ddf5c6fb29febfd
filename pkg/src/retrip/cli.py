"""``retrip`` command line: one subcommand per pipeline stage plus benchmark tooling.

Configuration precedence, lowest to highest: built-in defaults, the ``--env``
preset, the ``--config`` file, then individual flags.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import synth
from .config import ENV_PRESETS, PipelineConfig, format_config, parse_config_text
from .evaluation import evaluate_benchmark, write_evaluation
from .instances import segment_instances
from .keypoints import extract_keypoints
from .pipeline import LoopDetector, best_verified, extract_features
from .retrieval import DescriptorDB, load_db, save_db
from .scan_io import load_scan

# flag -> flat config key
_FLOAT_FLAGS = {
    "z-a": "z_a", "delta-r": "delta_r", "radius": "radius", "side-min": "side_min", "side-max": "side_max",
    "resolution": "resolution", "degenerate-eps": "degenerate_eps", "side-tol": "side_tol",
    "size-ratio-tol": "size_ratio_tol", "voxel-size": "voxel_size", "planarity-ratio": "planarity_ratio",
    "z-l": "z_l", "sigma-n": "sigma_n", "sigma-d": "sigma_d", "accept-threshold": "accept_threshold",
    "sigma-floor": "sigma_floor", "gt-threshold": "gt_threshold",
}
_INT_FLAGS = {
    "window": "window", "k": "k", "min-cluster-size": "min_cluster_size", "max-cluster-size": "max_cluster_size",
    "candidates": "num_candidates", "min-voxel-points": "min_voxel_points", "sigma-lambda": "sigma_lambda",
    "max-hypotheses": "max_hypotheses", "min-votes": "min_votes",
}
_OPTIONAL_FLAGS = {"exclusion": ("exclusion", int), "consensus-tol": ("consensus_tol", float)}


class CliError(Exception):
    pass


def _optional(kind):
    def parse(text: str):
        if text.lower() in ("none", "off"):
            return None
        return kind(text)
    return parse


def _float(text: str) -> float:
    return float("inf") if text.lower() in ("inf", "infinity") else float(text)


def _config_parent() -> argparse.ArgumentParser:
    # SUPPRESS keeps unset flags out of the namespace, so an explicit "none" survives
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = p.add_argument_group("pipeline configuration")
    g.add_argument("--env", choices=sorted(ENV_PRESETS), help="environment preset (default outdoor)")
    for flag, key in _FLOAT_FLAGS.items():
        g.add_argument(f"--{flag}", dest=f"cfg_{key}", type=_float, metavar="X")
    for flag, key in _INT_FLAGS.items():
        g.add_argument(f"--{flag}", dest=f"cfg_{key}", type=int, metavar="N")
    for flag, (key, kind) in _OPTIONAL_FLAGS.items():
        g.add_argument(f"--{flag}", dest=f"cfg_{key}", type=_optional(kind), metavar="X|none")
    lm = g.add_mutually_exclusive_group()
    lm.add_argument("--label-match", dest="cfg_require_label_match", action="store_const", const=True)
    lm.add_argument("--no-label-match", dest="cfg_require_label_match", action="store_const", const=False)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="scene seed for generators")
    common.add_argument("--workers", type=int, default=None,
                        help="parallel workers for per-frame stages (default: available CPUs)")
    common.add_argument("--config", type=Path, help="flat 'key = value' configuration file")
    common.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    cfgp = _config_parent()

    parser = argparse.ArgumentParser(prog="retrip", description=__doc__.splitlines()[0])
    parser.add_argument("--print-config", dest="top_print_config", action="store_true",
                        help="print the default configuration and exit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common, cfgp])

    p = add("synth", "generate a seeded synthetic benchmark")
    p.add_argument("--preset", choices=sorted(synth.PRESETS), required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-markers", type=int)
    p.add_argument("--track-length", type=float)

    p = add("keypoints", "classify points as ARP / RRP / REM")
    p.add_argument("--in", dest="scan", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = add("instances", "cluster keypoints into the key-instance set")
    p.add_argument("--in", dest="scan", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = add("describe", "build triangle descriptors; optionally append the scan to a database")
    p.add_argument("--in", dest="scan", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--db", type=Path, help="database file to create or append to")
    p.add_argument("--frame", type=int, help="frame id (default: next id in --db, else 0)")

    p = add("query", "rank loop candidates for a scan")
    p.add_argument("--db", type=Path, required=True)
    p.add_argument("--scan", type=Path, required=True)
    p.add_argument("--frame", type=int)

    p = add("verify", "verify loop candidates geometrically and report the best one")
    p.add_argument("--db", type=Path, required=True)
    p.add_argument("--scan", type=Path, required=True)
    p.add_argument("--frame", type=int)

    p = add("evaluate", "stream a benchmark through the pipeline and write metrics")
    p.add_argument("--benchmark", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("metrics"))
    p.add_argument("--save-db", type=Path, help="write the final database here")

    p = add("bench", "time the per-frame pipeline on one scan")
    p.add_argument("--scan", type=Path, required=True)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--db", type=Path, help="database to search (default: the scan itself)")
    return parser


def resolve_config(args) -> PipelineConfig:
    flat: dict[str, object] = {}
    if args.config is not None:
        try:
            flat.update(parse_config_text(args.config.read_text()))
        except OSError as exc:
            raise CliError(f"cannot read config: {exc}") from exc
    for name, value in vars(args).items():
        if name.startswith("cfg_"):
            flat[name[4:]] = value
    env = getattr(args, "env", None) or flat.pop("env", None) or "outdoor"
    flat.pop("env", None)
    return PipelineConfig.preset(env, **flat)


def _next_frame(db: DescriptorDB | None, explicit: int | None) -> int:
    if explicit is not None:
        return explicit
    if db is None or not db.frame_ids:
        return 0
    return db.frame_ids[-1] + 1


def _writer(path: Path | None):
    fh = open(path, "w", newline="") if path is not None else sys.stdout
    return fh, csv.writer(fh, lineterminator="\n")


def _close(fh):
    if fh is not sys.stdout:
        fh.close()


def cmd_synth(args, cfg):
    over = {}
    if args.num_markers is not None:
        over["num_markers"] = args.num_markers
    if args.track_length is not None:
        over["track_length"] = args.track_length
    out = synth.synthesize(args.preset, args.out, seed=args.seed, workers=args.workers, **over)
    print(f"wrote {len(out)} scans to {args.out}")


def cmd_keypoints(args, cfg):
    cloud = load_scan(args.scan)
    labels = extract_keypoints(cloud, cfg.keypoint).labels(len(cloud))
    fh, w = _writer(args.out)
    w.writerow(["index", "class"])
    for i, c in enumerate(labels):
        w.writerow([i, c])
    _close(fh)


def cmd_instances(args, cfg):
    cloud = load_scan(args.scan)
    ks = segment_instances(cloud, extract_keypoints(cloud, cfg.keypoint), cfg.cluster)
    fh, w = _writer(args.out)
    w.writerow(["label", "size", "cx", "cy", "cz"])
    for inst in ks.instances:
        w.writerow([inst.label, inst.size, *(repr(v) for v in inst.centroid)])
    _close(fh)


def cmd_describe(args, cfg):
    db = None
    if args.db is not None and args.db.exists():
        db = load_db(args.db)
    fid = _next_frame(db, args.frame)
    cloud = load_scan(args.scan, frame_id=fid)
    feats = extract_features(cloud, cfg)
    if args.out is not None or args.db is None:
        fh, w = _writer(args.out)
        w.writerow(["t", "l12", "l23", "l13", "qx", "qy", "qz", "lab1", "lab2", "lab3", "size1", "size2", "size3"])
        d = feats.descriptors
        for s, q, lab, size in zip(d.sides, d.centroids, d.labels, d.sizes):
            w.writerow([fid, *(repr(float(v)) for v in s), *(repr(float(v)) for v in q), *lab.tolist(), *size.tolist()])
        _close(fh)
    if args.db is not None:
        if db is None:
            db = DescriptorDB(cfg.descriptor.resolution)
        db.insert_frame(feats.descriptors, feats.key_set, feats.planes)
        save_db(db, args.db)


def _load_query(args, cfg):
    db = load_db(args.db)
    if abs(db.resolution - cfg.descriptor.resolution) > 1e-12:
        raise CliError(f"database resolution {db.resolution} differs from --resolution {cfg.descriptor.resolution}")
    cloud = load_scan(args.scan, frame_id=_next_frame(db, args.frame))
    return db, extract_features(cloud, cfg)


def cmd_query(args, cfg):
    db, feats = _load_query(args, cfg)
    cands = db.retrieve_candidates(feats.descriptors, cfg.match)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["rank", "frame", "votes"])
    for i, c in enumerate(cands):
        w.writerow([i + 1, c.frame_id, c.votes])


def cmd_verify(args, cfg):
    db, feats = _load_query(args, cfg)
    results, _, _ = LoopDetector(cfg, db).query(feats)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["frame", "accepted", "coincidence", "votes",
                *(f"r{i}{j}" for i in range(3) for j in range(3)), "tx", "ty", "tz"])
    best = best_verified(results)
    if best is None:
        w.writerow(["", 0, 0.0, 0, *([""] * 12)])
        return
    cand, res = best
    w.writerow([cand.frame_id, int(res.accepted), repr(res.coincidence), cand.votes,
                *(repr(v) for v in res.transform.params())])


def cmd_evaluate(args, cfg):
    ev = evaluate_benchmark(args.benchmark, cfg, workers=args.workers)
    out = write_evaluation(ev, args.out)
    s = ev.summary()
    print(f"auc={s['auc']:.4f} max_f1={s['max_f1']:.4f} ap={s['average_precision']:.4f} -> {out}")
    if args.save_db is not None:
        save_db(ev.result.db, args.save_db)


def cmd_bench(args, cfg):
    if args.iters < 1:
        raise CliError("--iters must be >= 1")
    if args.db is not None:
        db = load_db(args.db)
        fid = _next_frame(db, None)
    else:
        cloud0 = load_scan(args.scan, frame_id=0)
        f0 = extract_features(cloud0, cfg)
        db = DescriptorDB(cfg.descriptor.resolution)
        db.insert_frame(f0.descriptors, f0.key_set, f0.planes)
        fid = 1 + (cfg.match.exclusion or 0)
    cloud = load_scan(args.scan, frame_id=fid)
    det = LoopDetector(cfg, db)
    rows = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        feats = extract_features(cloud, cfg)
        t1 = time.perf_counter()
        det.query(feats)
        t2 = time.perf_counter()
        rows.append(((t1 - t0) * 1e3, (t2 - t1) * 1e3, (t2 - t0) * 1e3))
    a = np.array(rows)
    print(f"{'ms':<6}{'Descriptor':>12}{'Search':>12}{'Total':>12}")
    for name, vals in (("p50", np.percentile(a, 50, axis=0)), ("p90", np.percentile(a, 90, axis=0)),
                       ("p99", np.percentile(a, 99, axis=0)), ("mean", a.mean(axis=0))):
        print(f"{name:<6}" + "".join(f"{v:12.2f}" for v in vals))


COMMANDS = {
    "synth": cmd_synth, "keypoints": cmd_keypoints, "instances": cmd_instances, "describe": cmd_describe,
    "query": cmd_query, "verify": cmd_verify, "evaluate": cmd_evaluate, "bench": cmd_bench,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit 2 after printing usage
        return int(exc.code or 0)
    if args.command is None:
        if args.top_print_config:
            sys.stdout.write(format_config(PipelineConfig.preset("outdoor")))
            return 0
        parser.print_usage(sys.stderr)
        print("retrip: error: a command is required", file=sys.stderr)
        return 2
    if args.workers is None:
        args.workers = os.cpu_count() or 1
    if args.workers < 1:
        parser.print_usage(sys.stderr)
        print("retrip: error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(format_config(cfg))
            return 0
        COMMANDS[args.command](args, cfg)
    except (CliError, ValueError, KeyError, OSError, TypeError) as exc:
        msg = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"retrip: error: {exc.__class__.__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

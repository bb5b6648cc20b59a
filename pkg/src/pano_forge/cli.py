"""Command-line entry point: ``pano-forge <command> ...``.

Commands hand data to each other through files:

    synth      render a synthetic fixture (frames + groundtruth.json)
    search     windowed correspondence search -> raw manifest
    propagate  long-range propagation over the correspondence graph
    calibrate  metric scale fit + translation filter -> metric manifest
    stats      corpus statistics as JSON
    losscheck  self-check of the masked-loss kernels
    validate   check that a manifest's frames exist and decode

Settings come from a JSON config file (``--config`` or the
``PANO_FORGE_CONFIG`` environment variable) and can be overridden by flags.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 external
service error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .correspondence_graph import DEFAULT_K_MAX, build_graph, connected_components, propagate
from .correspondence_search import (
    PairFailure,
    SearchConfig,
    search_frames,
    subsample,
    translation_filter,
    window_index_pairs,
)
from .dataset_io import from_correspondence, read_manifest, to_correspondence, validate_manifest, write_manifest
from .errors import ConfigError, DataError, PairEvaluationError, PanoForgeError
from .ingestion import DEFAULT_DECODER_CMD, DEFAULT_HAMMING_MAX, compute_stats, read_catalog, validate_frame_dir
from .loss_kernels import LossConfig, optimal_mask, run_checks
from .parallel import parallel_map
from .pose_estimation import (
    NoiseConfig,
    OracleDepthEstimator,
    OracleEstimator,
    RemoteEstimator,
    ScaleState,
    checked_estimate,
)
from .projection import load_pano, project, save_png, to_uint8
from .scale_calibration import calibrate_record
from .synth import CameraPose, default_scene, load_scene, make_trajectory, render_equirect, scene_from_dict, scene_to_dict

logger = logging.getLogger("pano_forge")

CONFIG_ENV = "PANO_FORGE_CONFIG"
GROUNDTRUTH_NAME = "groundtruth.json"
MAX_ERROR_RATE = 0.10


@dataclass
class PipelineConfig:
    fps: float = 1.0
    window: int = 20
    tau: float = 4.0
    min_translation: float = 0.25
    refine_iters: int = 20
    refine_step: float = 0.05
    refine_lr: float = 0.02
    fov: float = 0.5 * np.pi
    view_h: int = 256
    view_w: int = 256
    estimator: dict = field(default_factory=dict)        # {"oracle": path} or {"remote": url}
    depth_estimator: dict = field(default_factory=dict)  # same form; empty means "same as estimator"
    k_max: int = DEFAULT_K_MAX
    hamming_max: int = DEFAULT_HAMMING_MAX
    decoder_cmd: str = DEFAULT_DECODER_CMD
    workers: int = 1
    seed: int = 0
    conf_scale: float = 8.0
    overlap_exponent: float = 0.5
    rot_noise: float = 0.0
    trans_noise: float = 0.0
    depth_noise: float = 0.0
    timeout: float = 60.0
    retries: int = 3

    def __post_init__(self):
        for name, spec in (("estimator", self.estimator), ("depth_estimator", self.depth_estimator)):
            if not isinstance(spec, dict) or len(spec) > 1 or (spec and next(iter(spec)) not in ("oracle", "remote")):
                raise ConfigError(f"{name} must be {{\"oracle\": path}} or {{\"remote\": url}}")
        if self.k_max < 2:
            raise ConfigError("k_max must be >= 2")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.search_config()
        except DataError as exc:
            raise ConfigError(str(exc)) from None

    def search_config(self) -> SearchConfig:
        return SearchConfig(fps=self.fps, window=self.window, tau=self.tau,
                            min_translation=self.min_translation, refine_iters=self.refine_iters,
                            refine_step=self.refine_step, refine_lr=self.refine_lr, fov=self.fov,
                            view_h=self.view_h, view_w=self.view_w)


CONFIG_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def load_config(path=None, overrides=None) -> PipelineConfig:
    """Merge defaults, the JSON config file and explicit overrides (in that
    order of increasing precedence)."""
    values = {}
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = sorted(set(doc) - set(CONFIG_FIELDS))
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        values.update(doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# fixtures and estimators


def load_groundtruth(path):
    """Returns ``(scene, cameras, planted_scale)`` from a synth sidecar."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read ground truth {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    try:
        scene = scene_from_dict(doc["scene"])
        cams = {(doc["video_id"], int(p["timestamp_ms"])): CameraPose(np.asarray(p["position"], float),
                                                                       np.asarray(p["orientation_wxyz"], float))
                for p in doc["poses"]}
        return scene, cams, float(doc["planted_scale"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed ground truth ({exc})") from None


def make_estimator(cfg: PipelineConfig):
    if not cfg.estimator:
        raise ConfigError("no estimator configured; pass --oracle PATH or --remote URL")
    kind, target = next(iter(cfg.estimator.items()))
    if kind == "remote":
        return RemoteEstimator(target, timeout=cfg.timeout, retries=cfg.retries)
    scene, cams, scale = load_groundtruth(target)
    noise = NoiseConfig(cfg.rot_noise, cfg.trans_noise, 0.0)
    return OracleEstimator(scene, cams, scale, cfg.conf_scale, cfg.overlap_exponent, noise, cfg.seed)


def make_depth_estimator(cfg: PipelineConfig):
    spec = cfg.depth_estimator or cfg.estimator
    if not spec:
        raise ConfigError("no depth estimator configured")
    kind, target = next(iter(spec.items()))
    if kind == "remote":
        return RemoteEstimator(target, timeout=cfg.timeout, retries=cfg.retries)
    scene, cams, _ = load_groundtruth(target)
    return OracleDepthEstimator(scene, cams, "z", cfg.depth_noise, cfg.seed)


def load_video_frames(frames_root, fps):
    """``{video_id: [PanoFrame]}`` (subsampled, time-ordered) for every
    subdirectory of ``frames_root``."""
    root = Path(frames_root)
    if not root.is_dir():
        raise DataError(f"frames root {root} does not exist")
    videos = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        entries = validate_frame_dir(d)
        keep = set(subsample([ts for ts, _ in entries], fps))
        videos[d.name] = [load_pano(p, d.name) for ts, p in entries if ts in keep]
    if not videos:
        raise DataError(f"no video directories under {root}")
    return videos


def pairs_path(manifest) -> Path:
    return Path(str(manifest) + ".pairs.json")


def metrics_path(manifest) -> Path:
    return Path(str(manifest) + ".metrics.jsonl")


def read_pairs(manifest):
    """Sidecar of evaluated frame pairs: ``({video: {(ts_a, ts_b)}}, {video: {ts}})``."""
    p = pairs_path(manifest)
    if not p.exists():
        return {}, {}
    try:
        doc = json.loads(p.read_text())
        evaluated = {v: {tuple(x) for x in pairs} for v, pairs in doc["evaluated"].items()}
        propagated = {v: set(ts) for v, ts in doc.get("propagated_frames", {}).items()}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{p}: malformed pair sidecar ({exc})") from None
    return evaluated, propagated


def write_pairs(manifest, evaluated, propagated=None):
    doc = {"evaluated": {v: sorted([int(a), int(b)] for a, b in evaluated[v]) for v in sorted(evaluated)},
           "propagated_frames": {v: sorted(int(t) for t in propagated[v]) for v in sorted(propagated or {})}}
    pairs_path(manifest).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def _check_error_rate(failures, total):
    if failures:
        rate = len(failures) / max(total, 1)
        logger.warning("%d of %d view pairs failed (%.1f%%)", len(failures), total, 100 * rate)
        if rate > MAX_ERROR_RATE:
            worst = max(f.exit_code for f in failures)
            err = DataError(f"{len(failures)} of {total} view pairs failed, above the {MAX_ERROR_RATE:.0%} limit")
            err.exit_code = worst
            raise err


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: PipelineConfig):
    scene = load_scene(args.scene) if args.scene else default_scene(args.kind)
    if args.width % 2:
        raise ConfigError("--width must be even")
    try:
        traj = make_trajectory(scene, args.n, args.kind, args.speed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out)
    frames_dir = out / "frames" / args.video_id
    depth_dir = out / "depth" / args.video_id
    frames_dir.mkdir(parents=True, exist_ok=True)
    depth_dir.mkdir(parents=True, exist_ok=True)
    poses = []
    for k, cam in enumerate(traj):
        ts = int(round(k * args.interval_ms))
        rgb, depth = render_equirect(scene, cam, args.width, args.width // 2, args.supersample)
        save_png(frames_dir / f"{ts}.png", to_uint8(rgb))
        np.save(depth_dir / f"{ts}.npy", depth.astype(np.float32))
        poses.append({"timestamp_ms": ts, "position": [float(x) for x in cam.position],
                      "orientation_wxyz": [float(x) for x in cam.orientation]})
    doc = {"video_id": args.video_id, "kind": args.kind, "speed": args.speed,
           "planted_scale": args.planted_scale, "depth_dir": f"depth/{args.video_id}",
           "depth_kind": "range", "scene": scene_to_dict(scene), "poses": poses}
    (out / GROUNDTRUTH_NAME).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    logger.info("wrote %d frames to %s", len(traj), frames_dir)
    return 0


def cmd_search(args, cfg: PipelineConfig):
    scfg = cfg.search_config()
    estimator = make_estimator(cfg)
    videos = load_video_frames(args.frames_root, cfg.fps)
    records, failures, metrics, evaluated, total = [], [], [], {}, 0
    for vid, panos in videos.items():
        tasks, results = search_frames(panos, estimator, scfg, cfg.workers)
        total += len(tasks)
        evaluated[vid] = {(panos[i].timestamp_ms, panos[j].timestamp_ms) for i, j, _, _ in tasks}
        for (i, j, ka, kb), res in zip(tasks, results):
            entry = {"video_id": vid, "ts_a": panos[i].timestamp_ms, "ts_b": panos[j].timestamp_ms,
                     "view_a": ka, "view_b": kb}
            if isinstance(res, PairFailure):
                failures.append(res)
                entry.update(error=res.message)
            else:
                entry.update(mean_conf=float(f"{res.mean_conf:.9g}"), accepted=res.accepted)
                if res.accepted:
                    records.append(res.record)
            metrics.append(entry)
    write_manifest(records, args.out)
    write_pairs(args.out, evaluated)
    with open(metrics_path(args.out), "w") as fh:
        for m in metrics:
            fh.write(json.dumps(m, separators=(",", ":")) + "\n")
    logger.info("search: %d view pairs, %d accepted", total, len(records))
    _check_error_rate(failures, total)
    return 0


def cmd_propagate(args, cfg: PipelineConfig):
    scfg = cfg.search_config()
    manifest = read_manifest(args.manifest)
    if any(m.scale_state != ScaleState.RAW.value for m in manifest):
        raise DataError("propagation expects a raw (pre-calibration) manifest")
    records = [to_correspondence(m) for m in manifest]
    evaluated, propagated = read_pairs(args.manifest)
    estimator = make_estimator(cfg)
    videos = load_video_frames(args.frames_root, cfg.fps)
    new, failures, total = [], [], 0
    for vid in sorted({r.video_id for r in records}):
        if vid not in videos:
            raise DataError(f"manifest references video {vid!r} with no frames under {args.frames_root}")
        panos = videos[vid]
        frames = {(vid, p.timestamp_ms): p for p in panos}
        done = set(evaluated.get(vid, set()))
        done |= {(panos[i].timestamp_ms, panos[j].timestamp_ms)
                 for i, j, ka, kb in window_index_pairs(len(panos), scfg.window) if ka == kb == 0}
        vid_records = [r for r in records if r.video_id == vid]
        done |= {(r.ts_a, r.ts_b) for r in vid_records}
        already = propagated.get(vid, set())
        g = build_graph(vid_records)
        for comp in connected_components(g):
            if all(n[1] in already for n in comp):
                continue
            missing = [n for n in comp if n not in frames]
            if missing:
                raise DataError(f"frames {missing[:3]} referenced by the manifest are missing")
            evaluated_nodes = {((vid, a), (vid, b)) for a, b in done}
            pairs, recs, fails = propagate(comp, frames, estimator, scfg, g, evaluated_nodes,
                                           cfg.k_max, cfg.workers)
            total += 16 * len(pairs)
            done |= {(a[1], b[1]) for a, b in pairs}
            new.extend(recs)
            failures.extend(fails)
            already = already | {n[1] for n in comp}
        evaluated[vid] = done
        propagated[vid] = already
    write_manifest(records + new, args.out)
    write_pairs(args.out, evaluated, propagated)
    logger.info("propagation: %d new records", len(new))
    print(json.dumps({"new_records": len(new), "evaluated_view_pairs": total}))
    _check_error_rate(failures, total)
    return 0


def _calibrate_task(state, rec):
    cfg, panos = state["cfg"], state["panos"]
    try:
        pa = panos[(rec.video_id, rec.ts_a)]
        pb = panos[(rec.video_id, rec.ts_b)]
    except KeyError as exc:
        return PairFailure(rec.key, f"missing frame {exc}", 2)
    va = project(pa, rec.angles_a, cfg.view_h, cfg.view_w, deferred=True)
    vb = project(pb, rec.angles_b, cfg.view_h, cfg.view_w, deferred=True)
    try:
        est = checked_estimate(state["estimator"], va, vb)
        return calibrate_record(rec, state["depth"], est, va)
    except PanoForgeError as exc:
        exc = exc if isinstance(exc, PairEvaluationError) else PairEvaluationError(rec.key, exc)
        logger.warning("%s", exc)
        return PairFailure(rec.key, str(exc), exc.exit_code)


def cmd_calibrate(args, cfg: PipelineConfig):
    manifest = read_manifest(args.manifest)
    if any(m.scale_state != ScaleState.RAW.value for m in manifest):
        raise DataError("manifest already holds metric records; refusing to scale twice")
    records = [to_correspondence(m) for m in manifest]
    if not records:
        write_manifest([], args.out)
        return 0
    scfg = cfg.search_config()
    videos = load_video_frames(args.frames_root, cfg.fps)
    panos = {(p.video_id, p.timestamp_ms): p for v in videos.values() for p in v}
    state = {"cfg": scfg, "panos": panos, "estimator": make_estimator(cfg),
             "depth": make_depth_estimator(cfg)}
    results = parallel_map(_calibrate_task, records, state, cfg.workers)
    failures = [r for r in results if isinstance(r, PairFailure)]
    metric = [r for r in results if not isinstance(r, PairFailure)]
    kept = translation_filter(metric, cfg.min_translation)
    write_manifest(kept, args.out)
    logger.info("calibrate: %d records, %d below %.2f m dropped, %d failed", len(records),
                len(metric) - len(kept), cfg.min_translation, len(failures))
    _check_error_rate(failures, len(records))
    return 0


def cmd_stats(args, cfg: PipelineConfig):
    catalog = read_catalog(args.catalog)
    records = read_manifest(args.manifest) if args.manifest else []
    print(json.dumps(compute_stats(catalog, records).to_dict(), indent=1))
    return 0


def cmd_losscheck(args, cfg: PipelineConfig):
    results = run_checks(seed=args.seed, instances=args.instances, lam=args.lam,
                         flip_gradient_sign=args.inject_sign_error)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    if args.lam == 0:
        m = optimal_mask(np.random.default_rng(args.seed).normal(size=(8, 8, 3)), LossConfig(0.0))
        print(f"NOTE lambda=0 degenerate solution detected: optimal mask is all zero ({bool(np.all(m == 0))})")
    return 0 if all(r.passed for r in results) else 2


def cmd_validate(args, cfg: PipelineConfig):
    report = validate_manifest(args.manifest, args.frames_root)
    print(json.dumps(report.to_dict(), indent=1))
    return 0 if report.passed else 2


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _add_pipeline_flags(p):
    g = p.add_argument_group("pipeline settings (override the config file)")
    g.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    g.add_argument("--workers", type=int)
    g.add_argument("--fps", type=float)
    g.add_argument("--window", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--min-translation", type=float)
    g.add_argument("--refine-iters", type=int)
    g.add_argument("--refine-step", type=float)
    g.add_argument("--refine-lr", type=float)
    g.add_argument("--fov", type=float)
    g.add_argument("--view-size", type=int, help="square view side in pixels")
    g.add_argument("--k-max", type=int)
    g.add_argument("--seed", type=int)
    est = g.add_mutually_exclusive_group()
    est.add_argument("--oracle", metavar="GROUNDTRUTH_JSON", help="use the ground-truth oracle estimator")
    est.add_argument("--remote", metavar="URL", help="use a remote estimator service")
    g.add_argument("--depth-remote", metavar="URL", help="separate depth service")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pano-forge", description="Multi-view dataset mining from 360-degree video.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic fixture")
    p.add_argument("--scene", help="scene JSON (default: built-in scene for --kind)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--kind", choices=("line", "loop"), default="line")
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--supersample", type=int, default=1)
    p.add_argument("--interval-ms", type=float, default=1000.0)
    p.add_argument("--planted-scale", type=float, default=2.0)
    p.add_argument("--video-id", default="synth")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("search", help="windowed correspondence search")
    p.add_argument("frames_root")
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("propagate", help="propagate correspondences through the frame graph")
    p.add_argument("manifest")
    p.add_argument("frames_root")
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("calibrate", help="fit metric scale and filter short baselines")
    p.add_argument("manifest")
    p.add_argument("frames_root")
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("stats", help="catalog and manifest statistics")
    p.add_argument("--catalog", required=True)
    p.add_argument("--manifest")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("losscheck", help="verify the masked-loss kernels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--inject-sign-error", action="store_true", help="negate analytic gradients (self-test)")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_losscheck)

    p = sub.add_parser("validate", help="check manifest frames exist and decode")
    p.add_argument("manifest")
    p.add_argument("frames_root")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_validate)
    return parser


def _overrides(args) -> dict:
    ov = {}
    for name in ("workers", "fps", "window", "tau", "min_translation", "refine_iters", "refine_step",
                 "refine_lr", "fov", "k_max", "seed"):
        ov[name] = getattr(args, name, None)
    size = getattr(args, "view_size", None)
    if size is not None:
        ov["view_h"] = ov["view_w"] = size
    if getattr(args, "oracle", None):
        ov["estimator"] = {"oracle": args.oracle}
    elif getattr(args, "remote", None):
        ov["estimator"] = {"remote": args.remote}
    if getattr(args, "depth_remote", None):
        ov["depth_estimator"] = {"remote": args.depth_remote}
    return ov


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None), _overrides(args))
        return int(args.func(args, cfg))
    except PanoForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

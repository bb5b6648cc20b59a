"""Windowed correspondence search over the cardinal views of panoramic frames.

Frames are subsampled in time, every pair of frames at most ``window``
apart contributes all 4 x 4 cardinal view pairs, each candidate is scored by
the mean estimator confidence, accepted candidates have their view angles
refined to maximize that confidence, and (after metric calibration) pairs
with too small a baseline are discarded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvariantViolation, PairEvaluationError, PanoForgeError
from .parallel import parallel_map
from .pose_estimation import (
    PoseEstimate,
    RelativePose,
    ScaleState,
    checked_estimate,
    mean_confidence,
)
from .projection import CARDINAL_YAWS, DEFAULT_FOV, PanoFrame, ViewAngles, project

logger = logging.getLogger(__name__)

WINDOW = "window"
PROPAGATED = "propagated"


@dataclass(frozen=True)
class SearchConfig:
    fps: float = 1.0
    window: int = 20
    tau: float = 4.0
    min_translation: float = 0.25
    refine_iters: int = 20
    refine_step: float = 0.05
    refine_lr: float = 0.02
    fov: float = DEFAULT_FOV
    view_h: int = 256
    view_w: int = 256

    def __post_init__(self):
        if not self.fps > 0:
            raise InvariantViolation("fps must be > 0")
        if int(self.window) < 1:
            raise InvariantViolation("window must be >= 1")
        if not self.tau >= 0:
            raise InvariantViolation("tau must be >= 0")
        if not self.min_translation >= 0:
            raise InvariantViolation("min_translation must be >= 0")
        if int(self.refine_iters) < 0 or not (self.refine_step > 0 and self.refine_lr > 0):
            raise InvariantViolation("refinement parameters must be positive")
        if not (0 < self.fov < np.pi):
            raise InvariantViolation("fov must lie in (0, pi)")
        if int(self.view_h) < 1 or int(self.view_w) < 1:
            raise InvariantViolation("view dims must be positive")


@dataclass(frozen=True, eq=False)
class CandidatePair:
    pano_a: PanoFrame
    pano_b: PanoFrame
    angles_a: ViewAngles
    angles_b: ViewAngles

    def __post_init__(self):
        if self.pano_a.timestamp_ms == self.pano_b.timestamp_ms:
            raise InvariantViolation("a candidate pair needs two distinct frames")

    @property
    def frame_gap(self) -> float:
        return abs(self.pano_b.timestamp_ms - self.pano_a.timestamp_ms) / 1000.0

    @property
    def key(self):
        return (self.pano_a.video_id, int(self.pano_a.timestamp_ms), int(self.pano_b.timestamp_ms),
                self.angles_a.yaw, self.angles_b.yaw)

    def views(self, cfg: SearchConfig, angles_a=None, angles_b=None):
        va = project(self.pano_a, angles_a or self.angles_a, cfg.view_h, cfg.view_w, deferred=True)
        vb = project(self.pano_b, angles_b or self.angles_b, cfg.view_h, cfg.view_w, deferred=True)
        return va, vb


@dataclass(frozen=True, eq=False)
class CorrespondenceRecord:
    """An accepted view pair; ``sigma`` is set once the pose is metric."""

    video_id: str
    ts_a: int
    ts_b: int
    angles_a: ViewAngles
    angles_b: ViewAngles
    pose: RelativePose
    mean_conf: float
    sigma: float | None = None
    provenance: str = WINDOW

    def __post_init__(self):
        if self.provenance not in (WINDOW, PROPAGATED):
            raise InvariantViolation(f"unknown provenance {self.provenance!r}")
        if self.ts_a == self.ts_b:
            raise InvariantViolation("record joins a frame to itself")
        if self.mean_conf < 0:
            raise InvariantViolation("mean confidence must be >= 0")
        if self.pose.scale_state is ScaleState.METRIC and (self.sigma is None or self.sigma <= 0):
            raise InvariantViolation("metric records need a positive sigma")

    @property
    def frame_pair(self):
        return (self.ts_a, self.ts_b)

    @property
    def frame_gap(self) -> float:
        return abs(self.ts_b - self.ts_a) / 1000.0

    @property
    def key(self):
        return (self.video_id, self.ts_a, self.ts_b, self.angles_a.yaw, self.angles_b.yaw)


@dataclass(frozen=True, eq=False)
class Refinement:
    angles_a: ViewAngles
    angles_b: ViewAngles
    estimate: PoseEstimate
    mean_conf: float
    history: list = field(default_factory=list)  # accepted mean confidences, in order


@dataclass(frozen=True, eq=False)
class PairResult:
    key: tuple
    mean_conf: float                       # before refinement
    record: CorrespondenceRecord | None    # None when rejected
    history: list = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return self.record is not None


@dataclass(frozen=True)
class PairFailure:
    key: tuple
    message: str
    exit_code: int = 2


def subsample(timestamps, fps: float):
    """Greedy temporal subsampling: keep the first frame, then every frame at
    least ``1000 / fps`` ms after the last kept one."""
    gap = 1000.0 / fps
    kept = []
    for ts in timestamps:
        if not kept or ts - kept[-1] >= gap:
            kept.append(ts)
    return kept


def window_index_pairs(n: int, window: int):
    """``(i, j, ka, kb)`` for all frames i < j <= i + window and cardinal views ka, kb."""
    return [(i, j, ka, kb)
            for i in range(n)
            for j in range(i + 1, min(n, i + window + 1))
            for ka in range(4)
            for kb in range(4)]


def cardinal_pair(pano_a, pano_b, ka, kb, fov) -> CandidatePair:
    return CandidatePair(pano_a, pano_b, ViewAngles(0.0, CARDINAL_YAWS[ka], fov),
                         ViewAngles(0.0, CARDINAL_YAWS[kb], fov))


def window_pairs(frames, cfg: SearchConfig):
    """All cardinal view pairs of frames within ``cfg.window`` of each other,
    ordered by (i, j, yaw_a, yaw_b)."""
    return [cardinal_pair(frames[i], frames[j], ka, kb, cfg.fov)
            for i, j, ka, kb in window_index_pairs(len(frames), int(cfg.window))]


def _score(pair, estimator, cfg, params):
    lim = 0.5 * np.pi
    aa = ViewAngles(float(np.clip(params[0], -lim, lim)), params[1], cfg.fov)
    ab = ViewAngles(float(np.clip(params[2], -lim, lim)), params[3], cfg.fov)
    va, vb = pair.views(cfg, aa, ab)
    est = checked_estimate(estimator, va, vb)
    return aa, ab, est, mean_confidence(est.confidence)


def refine_pair(pair: CandidatePair, estimator, cfg: SearchConfig, initial=None) -> Refinement:
    """Finite-difference ascent of mean confidence over both views' pitch and yaw.

    Each iteration tries one step of length ``refine_lr`` (halved after every
    rejection) along the normalized central-difference gradient; a step is
    kept only if the mean confidence strictly increases. Stops after
    ``refine_iters`` trials or three rejections in a row.
    """
    lim = 0.5 * np.pi - 0.5 * cfg.fov
    p = np.array([pair.angles_a.pitch, pair.angles_a.yaw, pair.angles_b.pitch, pair.angles_b.yaw])
    clipped = p.copy()
    clipped[[0, 2]] = np.clip(p[[0, 2]], -lim, lim)
    if initial is None or np.any(clipped != p):
        aa, ab, est, mu = _score(pair, estimator, cfg, clipped)
    else:
        (est, mu), aa, ab = initial, pair.angles_a, pair.angles_b
    p = clipped
    history = [mu]
    delta = cfg.refine_step
    step = cfg.refine_lr
    direction = None
    rejects = 0
    for _ in range(int(cfg.refine_iters)):
        if direction is None:
            grad = np.zeros(4)
            for k in range(4):
                e = np.zeros(4)
                e[k] = delta
                grad[k] = (_score(pair, estimator, cfg, p + e)[3]
                           - _score(pair, estimator, cfg, p - e)[3]) / (2 * delta)
            norm = np.linalg.norm(grad)
            if norm == 0:
                break
            direction = grad / norm
        trial = p + step * direction
        trial[[0, 2]] = np.clip(trial[[0, 2]], -lim, lim)
        ta, tb, t_est, t_mu = _score(pair, estimator, cfg, trial)
        if t_mu > mu:
            p, aa, ab, est, mu = trial, ta, tb, t_est, t_mu
            history.append(mu)
            direction = None
            step = cfg.refine_lr
            rejects = 0
        else:
            rejects += 1
            step *= 0.5
            if rejects >= 3:
                break
    return Refinement(aa, ab, est, mu, history)


def evaluate_pair(pair: CandidatePair, estimator, cfg: SearchConfig, provenance=WINDOW) -> PairResult:
    """Score one candidate; accept at mean confidence >= tau, then refine."""
    try:
        va, vb = pair.views(cfg)
        est = checked_estimate(estimator, va, vb)
        mu = mean_confidence(est.confidence)
        if mu < cfg.tau:
            return PairResult(pair.key, mu, None)
        ref = refine_pair(pair, estimator, cfg, initial=(est, mu))
    except PanoForgeError as exc:
        raise PairEvaluationError(pair.key, exc) from exc
    record = CorrespondenceRecord(
        video_id=pair.pano_a.video_id,
        ts_a=int(pair.pano_a.timestamp_ms),
        ts_b=int(pair.pano_b.timestamp_ms),
        angles_a=ref.angles_a,
        angles_b=ref.angles_b,
        pose=ref.estimate.pose,
        mean_conf=ref.mean_conf,
        provenance=provenance,
    )
    return PairResult(pair.key, mu, record, ref.history)


def translation_filter(records, min_translation: float = 0.25):
    """Keep metric records whose baseline is at least ``min_translation`` meters."""
    records = list(records)
    for k, r in enumerate(records):
        if r.pose.scale_state is not ScaleState.METRIC:
            raise InvariantViolation(f"record {k} {r.key} is not metric; calibrate before filtering")
    return [r for r in records if np.linalg.norm(r.pose.translation) >= min_translation]


def _evaluate_task(state, task):
    i, j, ka, kb = task
    panos, cfg = state["panos"], state["cfg"]
    pair = cardinal_pair(panos[i], panos[j], ka, kb, cfg.fov)
    try:
        return evaluate_pair(pair, state["estimator"], cfg, state["provenance"])
    except PairEvaluationError as exc:
        logger.warning("%s", exc)
        return PairFailure(pair.key, str(exc), exc.exit_code)


def evaluate_candidates(panos, tasks, estimator, cfg: SearchConfig, provenance=WINDOW, workers=1):
    """Evaluate ``(i, j, ka, kb)`` index tasks over ``panos``, in task order.

    Failures are returned as :class:`PairFailure` entries instead of raising.
    """
    state = {"panos": list(panos), "cfg": cfg, "estimator": estimator, "provenance": provenance}
    return parallel_map(_evaluate_task, tasks, state, workers)


def search_frames(panos, estimator, cfg: SearchConfig, workers=1):
    """Run the window search over one video's (already subsampled) frames.

    Returns ``(tasks, results)`` where ``results[k]`` belongs to ``tasks[k]``.
    """
    tasks = window_index_pairs(len(panos), int(cfg.window))
    return tasks, evaluate_candidates(panos, tasks, estimator, cfg, WINDOW, workers)


def with_metric_pose(record: CorrespondenceRecord, pose: RelativePose, sigma: float):
    return replace(record, pose=pose, sigma=float(sigma))

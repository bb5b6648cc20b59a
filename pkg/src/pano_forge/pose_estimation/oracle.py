"""Ground-truth-backed stand-ins for the neural pose and depth estimators.

Both oracles look cameras up by the view's ``(video_id, timestamp_ms)`` and
ignore pixel content; geometry comes from raycasting the synthetic scene.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from ..errors import EstimatorError
from ..rotations import axis_angle_matrix
from ..synth import relative_view_pose, view_hits, view_rotation, visible_from
from .types import (
    ConfidenceMap,
    DepthMap,
    PointMap,
    PoseEstimate,
    RelativePose,
    ScaleState,
)

DEFAULT_CONF_SCALE = 8.0
DEFAULT_OVERLAP_EXPONENT = 0.5


@dataclass(frozen=True)
class NoiseConfig:
    rot_sigma: float = 0.0    # radians, random-axis rotation perturbation
    trans_sigma: float = 0.0  # estimator units, per translation component
    depth_sigma: float = 0.0  # log-space std of multiplicative depth noise


def call_seed(root: int, *parts) -> np.random.Generator:
    """Generator keyed on call content, so noise is independent of scheduling."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<q", int(root)))
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"|")
    return np.random.default_rng(int.from_bytes(h.digest(), "little"))


def _view_key(view):
    a = view.angles
    return (view.video_id, int(view.timestamp_ms), a.pitch.hex(), float(a.yaw).hex(), a.fov.hex(),
            tuple(view.shape))


class _CameraLookup:
    def __init__(self, scene, cameras, cache_size=512):
        self.scene = scene
        self.cameras = dict(cameras)
        self._cache_size = cache_size
        self._hits = OrderedDict()

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_hits"] = OrderedDict()
        return state

    def camera(self, view):
        key = (view.video_id, int(view.timestamp_ms))
        cam = self.cameras.get(key, self.cameras.get(int(view.timestamp_ms)))
        if cam is None:
            raise EstimatorError(f"oracle has no camera for frame {key}")
        return cam

    def hits(self, view):
        key = _view_key(view)
        if key in self._hits:
            self._hits.move_to_end(key)
            return self._hits[key]
        h, w = view.shape
        pts, rng, _ = view_hits(self.scene, self.camera(view), view.angles, h, w)
        self._hits[key] = (pts, rng)
        if len(self._hits) > self._cache_size:
            self._hits.popitem(last=False)
        return pts, rng


class OracleEstimator(_CameraLookup):
    """Pose estimator returning exact geometry at a planted dimensionless scale.

    The raw translation and pointmap are the metric values divided by
    ``planted_scale``. Confidence is the 3x3-smoothed indicator ``s`` of view-a
    pixels whose scene point view b also sees, scaled so that

        mean confidence = conf_scale * mean(s) ** overlap_exponent

    With ``overlap_exponent = 1`` the map is literally ``conf_scale * s``;
    the default 0.5 puts the tau = 4 acceptance boundary at a quarter of the
    view co-visible instead of a half.
    """

    def __init__(self, scene, cameras, planted_scale=1.0, conf_scale=DEFAULT_CONF_SCALE,
                 overlap_exponent=DEFAULT_OVERLAP_EXPONENT, noise=NoiseConfig(), seed=0):
        super().__init__(scene, cameras)
        if planted_scale <= 0:
            raise ValueError("planted_scale must be > 0")
        self.planted_scale = float(planted_scale)
        self.conf_scale = float(conf_scale)
        self.overlap_exponent = float(overlap_exponent)
        self.noise = noise
        self.seed = int(seed)

    def covisible_indicator(self, view_a, view_b) -> np.ndarray:
        h, w = view_a.shape
        pts, _ = self.hits(view_a)
        vis = visible_from(self.scene, pts, self.camera(view_b), view_b.angles, aspect=h / w)
        return vis.reshape(h, w).astype(float)

    def estimate(self, view_a, view_b) -> PoseEstimate:
        cam_a, cam_b = self.camera(view_a), self.camera(view_b)
        smooth = uniform_filter(self.covisible_indicator(view_a, view_b), size=3, mode="nearest")
        # the running-sum filter leaves round-off of order 1e-17 around zero
        smooth = np.clip(smooth, 0.0, 1.0)
        cov = float(smooth.mean())
        if cov > 0:
            conf = self.conf_scale * smooth * cov ** (self.overlap_exponent - 1.0)
        else:
            conf = np.zeros_like(smooth)

        R, t = relative_view_pose(cam_a, view_a.angles, cam_b, view_b.angles)
        t = t / self.planted_scale
        nz = self.noise
        if nz.rot_sigma > 0 or nz.trans_sigma > 0:
            rng = call_seed(self.seed, _view_key(view_a), _view_key(view_b))
            if nz.rot_sigma > 0:
                axis = rng.normal(size=3)
                R = axis_angle_matrix(axis, rng.normal(0.0, nz.rot_sigma)) @ R
            if nz.trans_sigma > 0:
                t = t + rng.normal(0.0, nz.trans_sigma, 3)

        pts, _ = self.hits(view_a)
        local = (pts - cam_a.position) @ view_rotation(cam_a, view_a.angles)
        return PoseEstimate(
            RelativePose.from_matrix(R, t, ScaleState.RAW),
            ConfidenceMap(conf),
            PointMap(local / self.planted_scale),
        )


class OracleDepthEstimator(_CameraLookup):
    """Metric depth from raycasting, optionally with lognormal noise.

    ``kind="z"`` returns depth along the optical axis (what the scale fit
    needs); ``kind="range"`` returns distance along each pixel ray.
    """

    def __init__(self, scene, cameras, kind="z", noise_sigma=0.0, seed=0):
        super().__init__(scene, cameras)
        if kind not in ("z", "range"):
            raise ValueError(f"unknown depth kind {kind!r}")
        self.kind = kind
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)

    def estimate_depth(self, view) -> DepthMap:
        pts, rng = self.hits(view)
        if self.kind == "range":
            depth = rng.copy()
        else:
            cam = self.camera(view)
            depth = ((pts - cam.position) @ view_rotation(cam, view.angles))[..., 2]
        if self.noise_sigma > 0:
            g = call_seed(self.seed, "depth", _view_key(view))
            depth = depth * np.exp(g.normal(0.0, self.noise_sigma, depth.shape))
        return DepthMap(depth)


def oracle_estimate(scene, cam_a, cam_b, view_a, view_b, noise_cfg=NoiseConfig(), planted_scale=1.0,
                    conf_scale=DEFAULT_CONF_SCALE, overlap_exponent=DEFAULT_OVERLAP_EXPONENT,
                    seed=0) -> PoseEstimate:
    """One-shot oracle call for an explicit camera pair."""
    cams = {view_a.source: cam_a, view_b.source: cam_b}
    if view_a.source == view_b.source and cam_a is not cam_b:
        raise ValueError("views share a source frame but were given different cameras")
    est = OracleEstimator(scene, cams, planted_scale, conf_scale, overlap_exponent, noise_cfg, seed)
    return est.estimate(view_a, view_b)

"""Estimator outputs and the checks applied to them at the interface boundary."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np

from ..errors import InvariantViolation
from ..rotations import matrix_to_quat, quat_to_matrix

# Pixels below this confidence are exempt from the positive-depth check and
# excluded from the scale fit.
VALIDITY_FLOOR = 0.01


class ScaleState(str, Enum):
    RAW = "raw"
    METRIC = "metric"


@dataclass(frozen=True, eq=False)
class RelativePose:
    """Rotation (unit quaternion w, x, y, z) and translation taking camera-a
    coordinates to camera-b coordinates: ``x_b = R @ x_a + t``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale_state: ScaleState = ScaleState.RAW

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise InvariantViolation(f"rotation must be 4 finite numbers, got {self.rotation!r}")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise InvariantViolation(f"rotation quaternion norm {np.linalg.norm(q):.6g} != 1")
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise InvariantViolation(f"translation must be 3 finite numbers, got {self.translation!r}")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale_state", ScaleState(self.scale_state))

    @classmethod
    def from_matrix(cls, R, t, scale_state=ScaleState.RAW) -> "RelativePose":
        return cls(matrix_to_quat(R), np.asarray(t, dtype=float), scale_state)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def compose(self, first: "RelativePose") -> "RelativePose":
        """``self`` after ``first``: maps first's source frame to self's target frame."""
        R = self.matrix @ first.matrix
        return RelativePose.from_matrix(R, self.matrix @ first.translation + self.translation,
                                        self.scale_state)

    def inverse(self) -> "RelativePose":
        Rt = self.matrix.T
        return RelativePose.from_matrix(Rt, -Rt @ self.translation, self.scale_state)


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise InvariantViolation(f"confidence map must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvariantViolation("confidence map has non-finite values")
        if np.any(v < 0):
            raise InvariantViolation("confidence map has negative values")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class PointMap:
    """Per-pixel scene points in the first camera's frame (estimator units)."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 3 or p.shape[2] != 3:
            raise InvariantViolation(f"pointmap must be h x w x 3, got shape {p.shape}")
        object.__setattr__(self, "points", p)

    @property
    def shape(self):
        return self.points.shape[:2]

    @property
    def depth(self) -> np.ndarray:
        return self.points[..., 2]


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Metric depth along the optical axis, meters."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise InvariantViolation(f"depth map must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise InvariantViolation("depth map must be finite and positive")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: RelativePose
    confidence: ConfidenceMap
    pointmap: PointMap = field(repr=False)

    def __post_init__(self):
        validate_estimate(self)


def validate_estimate(est: PoseEstimate, shape=None) -> PoseEstimate:
    """Check cross-field invariants; component invariants hold by construction."""
    if est.confidence.shape != est.pointmap.shape:
        raise InvariantViolation(
            f"confidence {est.confidence.shape} and pointmap {est.pointmap.shape} dims differ")
    if shape is not None and tuple(est.confidence.shape) != tuple(shape):
        raise InvariantViolation(f"estimate dims {est.confidence.shape} do not match views {shape}")
    confident = est.confidence.values >= VALIDITY_FLOOR
    z = est.pointmap.depth[confident]
    if not np.all(np.isfinite(z)) or np.any(z <= 0):
        raise InvariantViolation("pointmap depth must be positive where confidence is above the floor")
    return est


def mean_confidence(c: ConfidenceMap) -> float:
    """Spatial mean of the confidence map."""
    v = c.values if isinstance(c, ConfidenceMap) else np.asarray(c, dtype=float)
    if v.size == 0:
        raise ValueError("empty confidence map")
    return float(np.mean(v))


class PoseEstimator(Protocol):
    def estimate(self, view_a, view_b) -> PoseEstimate: ...


class DepthEstimator(Protocol):
    def estimate_depth(self, view) -> DepthMap: ...


def checked_estimate(estimator: PoseEstimator, view_a, view_b) -> PoseEstimate:
    """Run an estimator and re-check its output instead of trusting it."""
    if view_a.shape != view_b.shape:
        raise InvariantViolation(f"view dims differ: {view_a.shape} vs {view_b.shape}")
    est = estimator.estimate(view_a, view_b)
    if est.pose.scale_state is not ScaleState.RAW:
        raise InvariantViolation("estimators must return raw-scale poses")
    return validate_estimate(est, view_a.shape)


def checked_depth(estimator: DepthEstimator, view) -> DepthMap:
    d = estimator.estimate_depth(view)
    if tuple(d.shape) != tuple(view.shape):
        raise InvariantViolation(f"depth dims {d.shape} do not match view {view.shape}")
    return d

"""Metric scale recovery for dimensionless pose estimates.

The estimator's pointmap lives in arbitrary units. A scale ``sigma`` is fit
so that ``sigma * z`` agrees with a metric monocular depth map under a
confidence-weighted L1 loss, and the pose translation is multiplied by it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InvariantViolation, PairEvaluationError, PanoForgeError
from .pose_estimation import (
    VALIDITY_FLOOR,
    ConfidenceMap,
    DepthMap,
    PointMap,
    RelativePose,
    ScaleState,
    checked_depth,
)

logger = logging.getLogger(__name__)

__all__ = [
    "DepthMap",
    "ScaleFit",
    "weighted_median",
    "scale_objective",
    "fit_scale",
    "to_metric",
    "calibrate_record",
]


@dataclass(frozen=True)
class ScaleFit:
    sigma: float
    objective: float
    valid_pixel_count: int

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise InvariantViolation(f"sigma must be finite and > 0, got {self.sigma}")
        if self.valid_pixel_count < 1:
            raise InvariantViolation("a scale fit needs at least one valid pixel")


def weighted_median(values, weights) -> float:
    """Lower weighted median: the smallest ``v`` whose cumulative weight
    reaches half the total. Minimizes ``sum(w * |x - v|)`` over ``x``."""
    v = np.asarray(values, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if v.shape != w.shape or v.size == 0:
        raise ValueError("values and weights must be non-empty and the same size")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or not np.all(np.isfinite(v)):
        raise ValueError("weights must be finite and >= 0, values finite")
    total = w.sum()
    if total <= 0:
        raise ValueError("total weight must be positive")
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order])
    k = int(np.searchsorted(cum, 0.5 * total, side="left"))
    return float(v[order[min(k, v.size - 1)]])


def _valid_arrays(pointmap, depth, conf, floor):
    z = np.asarray(pointmap.depth if isinstance(pointmap, PointMap) else pointmap, dtype=float)
    d = np.asarray(depth.values if isinstance(depth, DepthMap) else depth, dtype=float)
    c = np.asarray(conf.values if isinstance(conf, ConfidenceMap) else conf, dtype=float)
    if not (z.shape == d.shape == c.shape):
        raise InvariantViolation(f"dims disagree: z {z.shape}, depth {d.shape}, conf {c.shape}")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(d)) and np.all(np.isfinite(c))):
        raise InvariantViolation("scale fit inputs must be finite")
    valid = (z > 0) & (c > floor)
    if not valid.any():
        raise DataError("no valid pixels for the scale fit (need z > 0 and confidence above floor)")
    return z[valid], d[valid], c[valid]


def scale_objective(sigma, pointmap, depth, conf, floor=VALIDITY_FLOOR) -> float:
    """``sum C * |sigma * z - D|`` over valid pixels."""
    z, d, c = _valid_arrays(pointmap, depth, conf, floor)
    return float(np.sum(c * np.abs(sigma * z - d)))


def fit_scale(pointmap, depth, conf, floor: float = VALIDITY_FLOOR) -> ScaleFit:
    """Closed-form minimizer of the confidence-weighted L1 depth residual.

    Args:
        pointmap: :class:`PointMap` (its z channel is used) or an (h, w) z array.
        depth: metric :class:`DepthMap` or (h, w) array.
        conf: :class:`ConfidenceMap` or (h, w) array.
        floor: pixels with confidence at or below this are ignored.

    The objective ``sum C |sigma z - D| = sum (C z) |sigma - D / z|`` is a
    weighted L1 location problem, so its minimizer is the weighted median of
    the ratios ``D / z`` with weights ``C z``.
    """
    z, d, c = _valid_arrays(pointmap, depth, conf, floor)
    sigma = weighted_median(d / z, c * z)
    if not sigma > 0:
        raise DataError(f"fitted scale {sigma} is not positive (depth map has non-positive values?)")
    return ScaleFit(sigma, float(np.sum(c * np.abs(sigma * z - d))), int(z.size))


def to_metric(pose: RelativePose, sigma: float) -> RelativePose:
    if pose.scale_state is not ScaleState.RAW:
        raise InvariantViolation("pose is already metric; refusing to scale it twice")
    if not (np.isfinite(sigma) and sigma > 0):
        raise InvariantViolation(f"sigma must be finite and > 0, got {sigma}")
    return RelativePose(pose.rotation, pose.translation * float(sigma), ScaleState.METRIC)


def calibrate_record(record, depth_estimator, estimate, view_a):
    """Fit sigma for one record against view a's depth and return the metric record.

    ``estimate`` is the pose estimate the record was accepted with (its
    pointmap and confidence live in view a's pixels).
    """
    # imported here: correspondence_search depends on pose_estimation only
    from .correspondence_search import with_metric_pose

    if record.pose.scale_state is not ScaleState.RAW:
        raise PairEvaluationError(record.key, InvariantViolation("record is already metric"))
    try:
        depth = checked_depth(depth_estimator, view_a)
        fit = fit_scale(estimate.pointmap, depth, estimate.confidence)
        pose = to_metric(record.pose, fit.sigma)
    except PanoForgeError as exc:
        raise PairEvaluationError(record.key, exc) from exc
    logger.debug("record %s: sigma %.6g over %d px", record.key, fit.sigma, fit.valid_pixel_count)
    return with_metric_pose(record, pose, fit.sigma)

"""Relative-pose and depth estimator interfaces with oracle and remote backends."""

from .oracle import (
    NoiseConfig,
    OracleDepthEstimator,
    OracleEstimator,
    call_seed,
    oracle_estimate,
)
from .remote import RemoteEstimator, remote_estimate
from .types import (
    VALIDITY_FLOOR,
    ConfidenceMap,
    DepthEstimator,
    DepthMap,
    PointMap,
    PoseEstimate,
    PoseEstimator,
    RelativePose,
    ScaleState,
    checked_depth,
    checked_estimate,
    mean_confidence,
    validate_estimate,
)

__all__ = [
    "VALIDITY_FLOOR",
    "ConfidenceMap",
    "DepthEstimator",
    "DepthMap",
    "NoiseConfig",
    "OracleDepthEstimator",
    "OracleEstimator",
    "PointMap",
    "PoseEstimate",
    "PoseEstimator",
    "RelativePose",
    "RemoteEstimator",
    "ScaleState",
    "call_seed",
    "checked_depth",
    "checked_estimate",
    "mean_confidence",
    "oracle_estimate",
    "remote_estimate",
    "validate_estimate",
]

"""HTTP client for an external pose/depth inference service.

Wire protocol (JSON over HTTP POST):

``/v1/estimate``
    request ``{"image_a": <base64 PNG>, "image_b": <base64 PNG>}``
    response ``{"rotation_wxyz": [w, x, y, z], "translation": [x, y, z],
    "confidence": {"dims": [h, w], "data": [...]},
    "pointmap": {"dims": [h, w, 3], "data": [...]}}``

``/v1/depth``
    request ``{"image": <base64 PNG>}``
    response ``{"depth": {"dims": [h, w], "data": [...]}}``

Arrays are row-major. Responses are validated against every invariant
before a :class:`PoseEstimate` is returned.
"""

from __future__ import annotations

import base64
import io
import logging
import time

import numpy as np
import requests
from PIL import Image

from ..errors import EstimatorError, InvariantViolation
from ..projection import to_uint8
from .types import (
    ConfidenceMap,
    DepthMap,
    PointMap,
    PoseEstimate,
    RelativePose,
    ScaleState,
    validate_estimate,
)

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0
DEFAULT_RETRIES = 3
DEFAULT_POOL_SIZE = 4


def encode_png_b64(image: np.ndarray) -> str:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(text: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(text))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _array(payload, key, ndim):
    obj = payload.get(key)
    if not isinstance(obj, dict) or "dims" not in obj or "data" not in obj:
        raise InvariantViolation(f"response field {key!r} must be an object with dims and data")
    dims = obj["dims"]
    if not isinstance(dims, list) or len(dims) != ndim or not all(isinstance(d, int) and d > 0 for d in dims):
        raise InvariantViolation(f"response field {key!r} has bad dims {dims!r}")
    try:
        arr = np.asarray(obj["data"], dtype=float)
    except (TypeError, ValueError):
        raise InvariantViolation(f"response field {key!r} has non-numeric data") from None
    if arr.ndim != 1 or arr.size != int(np.prod(dims)):
        raise InvariantViolation(f"response field {key!r}: {arr.size} values for dims {dims}")
    return arr.reshape(dims)


def _vector(payload, key, n):
    v = payload.get(key)
    if not isinstance(v, list) or len(v) != n:
        raise InvariantViolation(f"response field {key!r} must be a list of {n} numbers")
    try:
        return np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise InvariantViolation(f"response field {key!r} must be numeric") from None


def parse_estimate_payload(payload, shape=None) -> PoseEstimate:
    if not isinstance(payload, dict):
        raise InvariantViolation("estimate response must be a JSON object")
    pose = RelativePose(_vector(payload, "rotation_wxyz", 4), _vector(payload, "translation", 3),
                        ScaleState.RAW)
    est = PoseEstimate(pose, ConfidenceMap(_array(payload, "confidence", 2)),
                       PointMap(_array(payload, "pointmap", 3)))
    return validate_estimate(est, shape)


def estimate_to_payload(est: PoseEstimate) -> dict:
    """Inverse of :func:`parse_estimate_payload` (used by stub servers and tests)."""
    c, p = est.confidence.values, est.pointmap.points
    return {
        "rotation_wxyz": [float(x) for x in est.pose.rotation],
        "translation": [float(x) for x in est.pose.translation],
        "confidence": {"dims": list(c.shape), "data": c.ravel().tolist()},
        "pointmap": {"dims": list(p.shape), "data": p.ravel().tolist()},
    }


def parse_depth_payload(payload, shape=None) -> DepthMap:
    if not isinstance(payload, dict):
        raise InvariantViolation("depth response must be a JSON object")
    d = DepthMap(_array(payload, "depth", 2))
    if shape is not None and tuple(d.shape) != tuple(shape):
        raise InvariantViolation(f"depth dims {d.shape} do not match view {shape}")
    return d


class RemoteEstimator:
    """Pose and depth estimator backed by the HTTP service above.

    Timeouts, connection failures, 429 and 5xx responses are retried up to
    ``retries`` times with exponential backoff; other 4xx statuses, malformed
    bodies and invariant violations fail immediately.
    """

    def __init__(self, endpoint, timeout=DEFAULT_TIMEOUT, retries=DEFAULT_RETRIES, backoff=0.5,
                 pool_size=DEFAULT_POOL_SIZE):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = float(timeout)
        self.retries = int(retries)
        self.backoff = float(backoff)
        self.pool_size = int(pool_size)
        self._session = None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_session"] = None
        return state

    @property
    def session(self) -> requests.Session:
        if self._session is None:
            s = requests.Session()
            adapter = requests.adapters.HTTPAdapter(pool_connections=1, pool_maxsize=self.pool_size,
                                                    max_retries=0)
            s.mount("http://", adapter)
            s.mount("https://", adapter)
            self._session = s
        return self._session

    def _post(self, route, body):
        url = f"{self.endpoint}{route}"
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(url, json=body, timeout=self.timeout)
            except requests.Timeout as exc:
                last = EstimatorError(f"{url}: timed out after {self.timeout:g} s ({exc})", retryable=True)
            except requests.ConnectionError as exc:
                last = EstimatorError(f"{url}: connection failed ({exc})", retryable=True)
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = EstimatorError(f"{url}: HTTP {resp.status_code}", retryable=True)
                elif resp.status_code != 200:
                    raise EstimatorError(f"{url}: HTTP {resp.status_code}", retryable=False)
                else:
                    try:
                        return resp.json()
                    except ValueError:
                        raise EstimatorError(f"{url}: response is not JSON", retryable=False) from None
            logger.warning("attempt %d/%d failed: %s", attempt + 1, self.retries + 1, last)
        raise last

    def estimate(self, view_a, view_b) -> PoseEstimate:
        if view_a.shape != view_b.shape:
            raise InvariantViolation(f"view dims differ: {view_a.shape} vs {view_b.shape}")
        body = {"image_a": encode_png_b64(view_a.image), "image_b": encode_png_b64(view_b.image)}
        return parse_estimate_payload(self._post("/v1/estimate", body), view_a.shape)

    def estimate_depth(self, view) -> DepthMap:
        body = {"image": encode_png_b64(view.image)}
        return parse_depth_payload(self._post("/v1/depth", body), view.shape)


def remote_estimate(endpoint, view_a, view_b, **kwargs) -> PoseEstimate:
    return RemoteEstimator(endpoint, **kwargs).estimate(view_a, view_b)

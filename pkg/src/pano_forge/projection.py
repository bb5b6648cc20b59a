"""Spherical geometry: equirectangular <-> direction mapping and perspective views.

World convention: right-handed, +z up. Longitude 0 / latitude 0 is +x and
longitude grows toward +y. A view's body frame uses forward = +x, left = +y,
up = +z, so the identity view looks at the center column of the panorama.

Pixel (i, j) of an equirectangular image W x H covers
u in [j/W, (j+1)/W), v in [i/H, (i+1)/H); samples are taken at centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, InvariantViolation

TWO_PI = 2.0 * np.pi
CARDINAL_YAWS = (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi)
DEFAULT_FOV = 0.5 * np.pi
DEFAULT_VIEW_SIZE = 256

# Maps OpenCV-style camera axes (x right, y down, z forward) to body axes.
CV_TO_BODY = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)


def normalize_yaw(yaw: float) -> float:
    y = float(yaw) % TWO_PI
    # float modulo can round up to exactly 2*pi for tiny negative inputs
    return 0.0 if y >= TWO_PI else y


@dataclass(frozen=True)
class ViewAngles:
    """Pitch/yaw/fov of a perspective view, all in radians.

    ``yaw`` is normalized into [0, 2*pi) on construction.
    """

    pitch: float = 0.0
    yaw: float = 0.0
    fov: float = DEFAULT_FOV

    def __post_init__(self):
        pitch, fov = float(self.pitch), float(self.fov)
        if not np.isfinite(pitch) or abs(pitch) > 0.5 * np.pi:
            raise InvariantViolation(f"pitch {pitch} outside [-pi/2, pi/2]")
        if not np.isfinite(self.yaw):
            raise InvariantViolation(f"yaw {self.yaw} is not finite")
        if not (0.0 < fov < np.pi):
            raise InvariantViolation(f"fov {fov} outside (0, pi)")
        object.__setattr__(self, "pitch", pitch)
        object.__setattr__(self, "fov", fov)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))


@dataclass(frozen=True, eq=False)
class PanoFrame:
    """One equirectangular frame. ``image`` is uint8 RGB, H x W x 3, W = 2H."""

    video_id: str
    timestamp_ms: int
    image: np.ndarray = field(repr=False)

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3:
            raise InvariantViolation(f"pano image must be H x W x 3, got {img.shape}")
        h, w = img.shape[:2]
        if h < 1 or w != 2 * h:
            raise InvariantViolation(f"equirectangular image must have W = 2H, got {w}x{h}")
        if int(self.timestamp_ms) < 0:
            raise InvariantViolation(f"negative timestamp {self.timestamp_ms}")

    @property
    def source(self) -> tuple[str, int]:
        return (self.video_id, int(self.timestamp_ms))


class PerspectiveView:
    """A pinhole view cut from a panorama. ``image`` is float32 in [0, 1], h x w x 3.

    Views built with :meth:`deferred` render their pixels on first access,
    which keeps geometry-only consumers from paying for resampling.
    """

    __slots__ = ("video_id", "timestamp_ms", "angles", "_image", "_shape", "_render")

    def __init__(self, video_id, timestamp_ms, angles, image=None, *, shape=None, render=None):
        self.video_id = video_id
        self.timestamp_ms = int(timestamp_ms)
        self.angles = angles
        self._image = None if image is None else np.asarray(image)
        self._render = render
        if self._image is not None:
            if self._image.ndim != 3 or min(self._image.shape[:2]) < 1:
                raise InvariantViolation(f"bad view image shape {self._image.shape}")
            self._shape = tuple(self._image.shape[:2])
        else:
            if render is None or shape is None or min(shape) < 1:
                raise InvariantViolation("a deferred view needs a positive shape and a renderer")
            self._shape = (int(shape[0]), int(shape[1]))

    @classmethod
    def deferred(cls, pano, angles, out_h, out_w):
        return cls(pano.video_id, pano.timestamp_ms, angles, shape=(out_h, out_w),
                   render=lambda: _render_view(pano, angles, out_h, out_w))

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = self._render()
            self._render = None
        return self._image

    @property
    def source(self) -> tuple[str, int]:
        return (self.video_id, self.timestamp_ms)

    @property
    def shape(self) -> tuple[int, int]:
        return self._shape

    def __repr__(self):
        return f"PerspectiveView({self.video_id!r}, {self.timestamp_ms}, {self.angles}, shape={self._shape})"


def _uv_to_dirs(u, v):
    u, v = np.broadcast_arrays(u, v)
    lon = (u - 0.5) * TWO_PI
    lat = (0.5 - v) * np.pi
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)


def _dirs_to_uv(d):
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    rho = np.hypot(x, y)
    lon = np.arctan2(y, x)
    lat = np.arctan2(z, rho)
    u = (lon / TWO_PI + 0.5) % 1.0
    u = np.where(u >= 1.0, 0.0, u)
    # poles have no longitude; pin them to the center column
    u = np.where(rho == 0.0, 0.5, u)
    v = 0.5 - lat / np.pi
    return u, v


def equirect_uv_to_dir(u, v):
    """Unit direction for normalized equirectangular coordinates.

    Accepts scalars or broadcastable arrays; returns shape ``(..., 3)``.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(~np.isfinite(u)) or np.any((u < 0.0) | (u >= 1.0)):
        raise ValueError("u must lie in [0, 1)")
    if np.any(~np.isfinite(v)) or np.any((v < 0.0) | (v > 1.0)):
        raise ValueError("v must lie in [0, 1]")
    return _uv_to_dirs(u, v)


def dir_to_equirect_uv(d):
    """Inverse of :func:`equirect_uv_to_dir`; ``u`` wraps modulo 1.

    At the poles longitude is undefined and ``u`` is reported as 0.5.
    """
    d = np.asarray(d, dtype=float)
    n = np.linalg.norm(d, axis=-1)
    if np.any(n == 0.0):
        raise ValueError("zero direction vector")
    if np.any(np.abs(n - 1.0) > 1e-9):
        raise ValueError("direction must be unit length")
    u, v = _dirs_to_uv(d)
    if u.ndim == 0:
        return float(u), float(v)
    return u, v


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_from_angles(angles: ViewAngles) -> np.ndarray:
    """Body-to-panorama rotation: yaw about +z, then pitch about the turned lateral axis.

    Positive pitch tilts the forward axis toward +z.
    """
    return _rot_z(angles.yaw) @ _rot_y(-angles.pitch)


def focal_length(width: int, fov: float) -> float:
    return 0.5 * width / np.tan(0.5 * fov)


def camera_rays(h: int, w: int, fov: float) -> np.ndarray:
    """Unit body-frame rays through pixel centers, shape (h, w, 3).

    Pixels are square, so the vertical field of view follows from h / w.
    The returned array is shared and read-only.
    """
    return _camera_rays(int(h), int(w), float(fov))


@lru_cache(maxsize=64)
def _camera_rays(h, w, fov):
    f = focal_length(w, fov)
    xs = np.arange(w) + 0.5 - 0.5 * w
    ys = np.arange(h) + 0.5 - 0.5 * h
    rays = np.empty((h, w, 3))
    rays[..., 0] = f
    rays[..., 1] = -xs[None, :]
    rays[..., 2] = -ys[:, None]
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    rays.setflags(write=False)
    return rays


def sample_bilinear(image: np.ndarray, u, v) -> np.ndarray:
    """Bilinear lookup at normalized (u, v); wraps horizontally, clamps vertically."""
    img = np.asarray(image)
    H, W = img.shape[:2]
    x = np.asarray(u) * W - 0.5
    y = np.asarray(v) * H - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64) % W
    x1 = (x0 + 1) % W
    y0 = y0.astype(np.int64)
    y1 = np.clip(y0 + 1, 0, H - 1)
    y0 = np.clip(y0, 0, H - 1)
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _render_view(pano, angles, out_h, out_w):
    rays = camera_rays(out_h, out_w, angles.fov)
    dirs = rays @ rotation_from_angles(angles).T
    u, v = _dirs_to_uv(dirs)
    rgb = sample_bilinear(pano.image, u, v)
    if pano.image.dtype == np.uint8:
        rgb = rgb / 255.0
    return rgb.astype(np.float32)


def project(pano: PanoFrame, angles: ViewAngles, out_h: int = DEFAULT_VIEW_SIZE,
            out_w: int = DEFAULT_VIEW_SIZE, deferred: bool = False) -> PerspectiveView:
    """Render the perspective view of ``pano`` seen at ``angles``.

    Each output ray is rotated into the panorama, converted to (u, v) and
    sampled bilinearly. With ``deferred=True`` the pixels are only computed
    when ``.image`` is first read.
    """
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"degenerate output size {out_h}x{out_w}")
    if deferred:
        return PerspectiveView.deferred(pano, angles, out_h, out_w)
    return PerspectiveView(pano.video_id, pano.timestamp_ms, angles,
                           _render_view(pano, angles, out_h, out_w))


def cardinal_views(pano: PanoFrame, fov: float = DEFAULT_FOV,
                   out_h: int = DEFAULT_VIEW_SIZE, out_w: int = DEFAULT_VIEW_SIZE):
    """The four level views at yaw 0, pi/2, pi, 3pi/2, in that order."""
    return [project(pano, ViewAngles(0.0, yaw, fov), out_h, out_w) for yaw in CARDINAL_YAWS]


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    Image.fromarray(img).save(path, format="PNG")


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float raster to 8 bits."""
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_pano(path, video_id: str | None = None) -> PanoFrame:
    """Read ``{timestamp_ms}.png`` as a :class:`PanoFrame`, enforcing W = 2H."""
    path = Path(path)
    try:
        ts = int(path.stem)
    except ValueError:
        raise DataError(f"{path}: frame name must be an integer timestamp in ms") from None
    try:
        img = load_png(path)
    except OSError as exc:
        raise DataError(f"{path}: unreadable PNG ({exc})") from None
    h, w = img.shape[:2]
    if w != 2 * h:
        raise DataError(f"{path}: equirectangular frame must have W = 2H, got {w}x{h}")
    return PanoFrame(video_id if video_id is not None else path.parent.name, ts, img)

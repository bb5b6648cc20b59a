"""Synthetic 360-degree scenes with exact ground truth.

A scene is a room (axis-aligned box or sphere, seen from inside) holding
spheres and axis-aligned boxes. Surfaces are flat-shaded and modulated by a
checkerboard so every wall carries texture. Everything here is deterministic:
the raycaster is vectorized numpy and the only randomness (Monte-Carlo
co-visibility) is driven by an explicit seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DataError, InvariantViolation
from .projection import (
    CV_TO_BODY,
    ViewAngles,
    _uv_to_dirs,
    camera_rays,
    rotation_from_angles,
)
from .rotations import quat_to_matrix, yaw_quat

EPS = 1e-9
CHECKER_DARK = 0.8

DEFAULT_WALL_COLORS = (
    (0.80, 0.45, 0.40),
    (0.45, 0.70, 0.50),
    (0.45, 0.55, 0.80),
    (0.80, 0.75, 0.45),
    (0.55, 0.50, 0.45),
    (0.85, 0.85, 0.80),
)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color: tuple = (0.7, 0.3, 0.3)


@dataclass(frozen=True)
class Box:
    min: tuple
    max: tuple
    color: tuple = (0.3, 0.3, 0.7)


@dataclass(frozen=True)
class Room:
    """Interior of a box (``min``/``max``) or a sphere (``center``/``radius``).

    ``wall_colors`` is ordered -x, +x, -y, +y, -z, +z for box rooms; a
    spherical room uses the first entry only.
    """

    shape: str = "box"
    min: tuple = (-5.0, -5.0, -1.5)
    max: tuple = (5.0, 5.0, 2.5)
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 3.0
    wall_colors: tuple = DEFAULT_WALL_COLORS
    checker: float = 0.5


@dataclass(frozen=True)
class SceneSpec:
    room: Room = field(default_factory=Room)
    primitives: tuple = ()
    seed: int = 0

    def __post_init__(self):
        room = self.room
        if room.shape not in ("box", "sphere"):
            raise InvariantViolation(f"room.shape must be 'box' or 'sphere', got {room.shape!r}")
        if room.checker <= 0:
            raise InvariantViolation("room.checker must be > 0")
        if room.shape == "box" and np.any(np.asarray(room.max) <= np.asarray(room.min)):
            raise InvariantViolation("room.max must exceed room.min on every axis")
        if room.shape == "sphere" and room.radius <= 0:
            raise InvariantViolation("room.radius must be > 0")
        for k, p in enumerate(self.primitives):
            if isinstance(p, Sphere):
                if p.radius <= 0:
                    raise InvariantViolation(f"primitives[{k}].radius must be > 0")
                lo = np.asarray(p.center) - p.radius
                hi = np.asarray(p.center) + p.radius
            else:
                lo, hi = np.asarray(p.min, float), np.asarray(p.max, float)
                if np.any(hi <= lo):
                    raise InvariantViolation(f"primitives[{k}] has non-positive extent")
            if not _box_inside_room(room, lo, hi):
                raise InvariantViolation(f"primitives[{k}] is not inside the room")


def _box_inside_room(room, lo, hi):
    if room.shape == "box":
        return bool(np.all(lo >= np.asarray(room.min)) and np.all(hi <= np.asarray(room.max)))
    corners = np.array([[a, b, c] for a in (lo[0], hi[0]) for b in (lo[1], hi[1]) for c in (lo[2], hi[2])])
    return bool(np.all(np.linalg.norm(corners - np.asarray(room.center), axis=1) <= room.radius))


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera position (meters) and body-to-world orientation (w, x, y, z)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise InvariantViolation("camera orientation must be a nonzero quaternion")
        object.__setattr__(self, "orientation", q / n)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        rot = quat_to_matrix(self.orientation)
        rot.flags.writeable = False
        object.__setattr__(self, "_rotation", rot)

    @property
    def rotation(self) -> np.ndarray:
        return self._rotation


class RayHits(NamedTuple):
    t: np.ndarray        # hit distance along the unit ray
    surface: np.ndarray  # 0..5 room faces (0 for a spherical room), 6 + k primitive k
    axis: np.ndarray     # normal axis for planar faces, -1 for curved ones


# ---------------------------------------------------------------------------
# ray-primitive intersection


def _primitive_arrays(scene):
    """Primitive parameters stacked by type, cached on the (frozen) scene."""
    cached = scene.__dict__.get("_stacked")
    if cached is None:
        sph = [k for k, p in enumerate(scene.primitives) if isinstance(p, Sphere)]
        box = [k for k, p in enumerate(scene.primitives) if not isinstance(p, Sphere)]
        prims = scene.primitives
        cached = (
            np.array(sph, dtype=np.int64),
            np.array([prims[k].center for k in sph], dtype=float).reshape(-1, 3),
            np.array([prims[k].radius for k in sph], dtype=float),
            np.array(box, dtype=np.int64),
            np.array([prims[k].min for k in box], dtype=float).reshape(-1, 3),
            np.array([prims[k].max for k in box], dtype=float).reshape(-1, 3),
        )
        object.__setattr__(scene, "_stacked", cached)
    return cached


def _hit_spheres_outside(o, dT, centers, radii):
    """(K, N) entry distances into K spheres, inf on a miss."""
    oc = o - centers
    b = oc @ dT
    disc = b * b - ((oc * oc).sum(axis=1) - radii * radii)[:, None]
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    return np.where((disc >= 0) & (t > EPS), t, np.inf)


def _hit_boxes_outside(o, invT, lo, hi):
    """(K, N) entry distances into K boxes and the (K, 3, N) per-slab entries."""
    with np.errstate(invalid="ignore"):
        t1 = (lo - o)[:, :, None] * invT
        t2 = (hi - o)[:, :, None] * invT
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    tnear = np.maximum(np.maximum(tmin[:, 0], tmin[:, 1]), tmin[:, 2])
    tfar = np.minimum(np.minimum(tmax[:, 0], tmax[:, 1]), tmax[:, 2])
    hit = (tnear <= tfar) & (tnear > EPS)
    return np.where(hit, tnear, np.inf), tmin


def _room_exit(room, o, d, inv):
    n = len(d)
    if room.shape == "sphere":
        oc = o - np.asarray(room.center, dtype=float)
        b = d @ oc
        c = oc @ oc - room.radius ** 2
        t = -b + np.sqrt(np.maximum(b * b - c, 0.0))
        return t, np.zeros(n, dtype=np.int64), np.full(n, -1)
    lo, hi = np.asarray(room.min, float), np.asarray(room.max, float)
    with np.errstate(invalid="ignore"):
        t_axis = np.where(d > 0, (hi - o) * inv, np.where(d < 0, (lo - o) * inv, np.inf))
    axis = np.argmin(t_axis, axis=1)
    idx = np.arange(n)
    t = t_axis[idx, axis]
    face = 2 * axis + (d[idx, axis] > 0)
    return t, face.astype(np.int64), axis


def raycast(scene: SceneSpec, origin, dirs, include_room=True) -> RayHits:
    """Nearest hit of unit rays ``origin + t * dirs`` from one origin point.

    ``dirs`` is (N, 3). With ``include_room=False`` rays that miss every
    primitive report ``t = inf``.
    """
    o = np.asarray(origin, dtype=float).reshape(3)
    d = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n = len(d)
    with np.errstate(divide="ignore"):
        inv = 1.0 / d
    if include_room:
        t, surface, axis = _room_exit(scene.room, o, d, inv)
    else:
        t = np.full(n, np.inf)
        surface = np.full(n, -1, dtype=np.int64)
        axis = np.full(n, -1)
    if not scene.primitives:
        return RayHits(t, surface, axis)
    sph, centers, radii, box, lo, hi = _primitive_arrays(scene)
    dT = d.T
    tk = np.empty((len(scene.primitives), n))
    tmin = None
    if len(sph):
        tk[sph] = _hit_spheres_outside(o, dT, centers, radii)
    if len(box):
        tk[box], tmin = _hit_boxes_outside(o, inv.T, lo, hi)
    best = np.argmin(tk, axis=0)
    tb = tk[best, np.arange(n)]
    closer = np.flatnonzero(tb < t)  # the room wins ties
    if closer.size:
        t = t.copy()
        t[closer] = tb[closer]
        k = best[closer]
        surface[closer] = 6 + k
        axis[closer] = -1
        if tmin is not None:
            row = np.full(len(scene.primitives), -1)
            row[box] = np.arange(len(box))
            is_box = row[k] >= 0
            ids = closer[is_box]
            axis[ids] = np.argmax(tmin[row[k[is_box]], :, ids], axis=1)
    return RayHits(t, surface, axis)


def shade(scene: SceneSpec, points, hits: RayHits) -> np.ndarray:
    """Flat surface color times checkerboard parity, (N, 3) in [0, 1]."""
    room = scene.room
    colors = np.empty((len(points), 3))
    walls = np.asarray(room.wall_colors, dtype=float)
    is_room = hits.surface < 6
    if room.shape == "box":
        colors[is_room] = walls[hits.surface[is_room]]
    else:
        colors[is_room] = walls[0]
    for k, prim in enumerate(scene.primitives):
        m = hits.surface == 6 + k
        colors[m] = np.asarray(prim.color, dtype=float)
    cells = np.floor(points / room.checker).astype(np.int64)
    # the coordinate normal to a planar face is constant there; leave it out
    for ax in range(3):
        cells[hits.axis == ax, ax] = 0
    dark = cells.sum(axis=1) % 2 == 1
    colors[dark] *= CHECKER_DARK
    return colors


# ---------------------------------------------------------------------------
# rendering


def view_rotation(cam: CameraPose, angles: ViewAngles) -> np.ndarray:
    """Rotation taking OpenCV-style view-camera coordinates to world coordinates."""
    return cam.rotation @ rotation_from_angles(angles) @ CV_TO_BODY


def render_equirect(scene: SceneSpec, cam: CameraPose, W: int, H: int, supersample: int = 1):
    """Panorama image (H x W x 3 float in [0, 1]) and ray-distance depth (H x W)."""
    if W < 2 or H < 1 or W != 2 * H:
        raise ValueError(f"equirectangular render needs W = 2H, got {W}x{H}")
    s = int(supersample)
    us = (np.arange(W * s) + 0.5) / (W * s)
    vs = (np.arange(H * s) + 0.5) / (H * s)
    dirs = _uv_to_dirs(us[None, :], vs[:, None]).reshape(-1, 3) @ cam.rotation.T
    hits = raycast(scene, cam.position, dirs)
    pts = cam.position + dirs * hits.t[:, None]
    rgb = shade(scene, pts, hits).reshape(H * s, W * s, 3)
    depth = hits.t.reshape(H * s, W * s)
    if s > 1:
        rgb = rgb.reshape(H, s, W, s, 3).mean(axis=(1, 3))
        depth = depth[s // 2::s, s // 2::s]
    return rgb, depth


def view_hits(scene: SceneSpec, cam: CameraPose, angles: ViewAngles, h: int, w: int):
    """World hit points (h, w, 3) and ray distances for each pixel center of a view."""
    dirs = camera_rays(h, w, angles.fov).reshape(-1, 3) @ (cam.rotation @ rotation_from_angles(angles)).T
    hits = raycast(scene, cam.position, dirs)
    pts = cam.position + dirs * hits.t[:, None]
    return pts.reshape(h, w, 3), hits.t.reshape(h, w), hits


def render_perspective(scene: SceneSpec, cam: CameraPose, angles: ViewAngles, h: int, w: int):
    """Direct pinhole raycast: (image, z-depth, ray distance)."""
    pts, rng, hits = view_hits(scene, cam, angles, h, w)
    rgb = shade(scene, pts.reshape(-1, 3), hits).reshape(h, w, 3)
    R = view_rotation(cam, angles)
    z = ((pts - cam.position) @ R)[..., 2]
    return rgb, z, rng


# ---------------------------------------------------------------------------
# trajectories and ground-truth geometry


def inside_free_space(scene: SceneSpec, p, margin=0.05) -> bool:
    p = np.asarray(p, dtype=float)
    room = scene.room
    if room.shape == "box":
        if np.any(p < np.asarray(room.min) + margin) or np.any(p > np.asarray(room.max) - margin):
            return False
    elif np.linalg.norm(p - np.asarray(room.center)) > room.radius - margin:
        return False
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            if np.linalg.norm(p - np.asarray(prim.center)) < prim.radius + margin:
                return False
        elif np.all(p > np.asarray(prim.min) - margin) and np.all(p < np.asarray(prim.max) + margin):
            return False
    return True


def _room_center(scene):
    room = scene.room
    if room.shape == "box":
        return 0.5 * (np.asarray(room.min, float) + np.asarray(room.max, float))
    return np.asarray(room.center, dtype=float)


def make_trajectory(scene: SceneSpec, n: int, kind: str = "line", speed: float = 1.0,
                    start=None, center=None, height: float = 0.0, heading: float = 0.0):
    """Camera poses at 1-second spacing.

    ``line`` moves at constant velocity along ``heading`` (radians about +z),
    centered on the room unless ``start`` is given. ``loop`` walks a circle
    whose last frame lands back on the first; cameras face along the path.
    """
    if n < 1:
        raise ValueError("trajectory needs n >= 1")
    poses = []
    if kind == "line":
        direction = np.array([np.cos(heading), np.sin(heading), 0.0])
        if start is None:
            c = _room_center(scene)
            start = np.array([c[0], c[1], height]) - direction * speed * (n - 1) / 2.0
        start = np.asarray(start, dtype=float)
        for k in range(n):
            poses.append(CameraPose(start + direction * speed * k, yaw_quat(heading)))
    elif kind == "loop":
        steps = max(n - 1, 1)
        radius = speed / (2.0 * np.sin(np.pi / steps)) if steps > 1 else 0.0
        c = _room_center(scene) if center is None else np.asarray(center, dtype=float)
        c = np.array([c[0], c[1], height])
        for k in range(n):
            a = 2.0 * np.pi * k / steps
            p = c + radius * np.array([np.cos(a), np.sin(a), 0.0])
            poses.append(CameraPose(p, yaw_quat(a + 0.5 * np.pi)))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    for k, pose in enumerate(poses):
        if not inside_free_space(scene, pose.position):
            raise ValueError(f"trajectory leaves free space at frame {k}: {pose.position}")
    return poses


def relative_pose(cam_a: CameraPose, cam_b: CameraPose):
    """(R, t) mapping body coordinates of ``cam_a`` into those of ``cam_b``."""
    Ra, Rb = cam_a.rotation, cam_b.rotation
    return Rb.T @ Ra, Rb.T @ (cam_a.position - cam_b.position)


def relative_view_pose(cam_a, angles_a, cam_b, angles_b):
    """(R, t) mapping view-a camera coordinates into view-b camera coordinates."""
    Ra, Rb = view_rotation(cam_a, angles_a), view_rotation(cam_b, angles_b)
    return Rb.T @ Ra, Rb.T @ (cam_a.position - cam_b.position)


def visible_from(scene: SceneSpec, points, cam: CameraPose, angles: ViewAngles, aspect: float = 1.0):
    """Which world points fall inside a view's frustum with nothing in between.

    ``aspect`` is the view's height / width.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rel = pts - cam.position
    body = rel @ (cam.rotation @ rotation_from_angles(angles))
    tan_h = np.tan(0.5 * angles.fov)
    tan_v = tan_h * aspect
    fwd = body[:, 0]
    in_frustum = (fwd > EPS) & (np.abs(body[:, 1]) <= tan_h * fwd) & (np.abs(body[:, 2]) <= tan_v * fwd)
    out = np.zeros(len(pts), dtype=bool)
    idx = np.flatnonzero(in_frustum)
    if idx.size == 0:
        return out
    dist = np.linalg.norm(rel[idx], axis=1)
    dirs = rel[idx] / dist[:, None]
    # the room interior is convex, so only primitives can occlude
    occ = raycast(scene, cam.position, dirs, include_room=False)
    out[idx] = occ.t >= dist * (1.0 - 1e-7) - 1e-9
    return out


def covisibility(scene: SceneSpec, cam_a: CameraPose, cam_b: CameraPose, angles_a: ViewAngles,
                 angles_b: ViewAngles, samples: int = 1024, seed: int | None = None,
                 aspect: float = 1.0) -> float:
    """Monte-Carlo fraction of view-a scene points that view b also sees."""
    rng = np.random.default_rng(scene.seed if seed is None else seed)
    tan_h = np.tan(0.5 * angles_a.fov)
    tx = rng.uniform(-tan_h, tan_h, samples)
    ty = rng.uniform(-tan_h * aspect, tan_h * aspect, samples)
    rays = np.stack([np.ones(samples), -tx, -ty], axis=1)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    dirs = rays @ (cam_a.rotation @ rotation_from_angles(angles_a)).T
    hits = raycast(scene, cam_a.position, dirs)
    pts = cam_a.position + dirs * hits.t[:, None]
    return float(np.mean(visible_from(scene, pts, cam_b, angles_b, aspect)))


# ---------------------------------------------------------------------------
# stock scenes and JSON form


def corridor_scene(length: float = 68.0, seed: int = 0) -> SceneSpec:
    """A long hallway for straight-line trajectories (camera height z = 0)."""
    x0 = 30.0 - 0.5 * length
    x1 = 30.0 + 0.5 * length
    prims = (
        Sphere((10.0, 2.0, -0.4), 0.6, (0.85, 0.30, 0.25)),
        Sphere((25.0, -2.2, 0.2), 0.5, (0.25, 0.75, 0.35)),
        Sphere((42.0, 1.8, 0.5), 0.7, (0.30, 0.40, 0.90)),
        Box((17.0, -2.8, -1.2), (19.0, -1.8, 0.3), (0.90, 0.70, 0.20)),
        Box((33.0, 1.6, -1.2), (35.0, 2.8, 1.0), (0.60, 0.25, 0.70)),
        Box((52.0, -2.8, -1.2), (54.0, -1.5, -0.2), (0.20, 0.65, 0.70)),
    )
    room = Room(shape="box", min=(x0, -3.0, -1.2), max=(x1, 3.0, 2.0))
    return SceneSpec(room=room, primitives=prims, seed=seed)


def hall_scene(seed: int = 0) -> SceneSpec:
    """A square hall with a central pillar, sized for loop trajectories."""
    prims = (
        Box((-0.6, -0.6, -1.2), (0.6, 0.6, 2.6), (0.75, 0.75, 0.30)),
        Sphere((6.0, 6.0, -0.2), 0.8, (0.85, 0.30, 0.25)),
        Sphere((-6.2, 5.5, 0.4), 0.6, (0.25, 0.75, 0.35)),
        Box((5.5, -7.5, -1.2), (7.5, -5.5, 0.5), (0.30, 0.40, 0.90)),
        Box((-7.6, -6.5, -1.2), (-6.0, -4.0, 1.2), (0.60, 0.25, 0.70)),
    )
    room = Room(shape="box", min=(-8.0, -8.0, -1.2), max=(8.0, 8.0, 2.6))
    return SceneSpec(room=room, primitives=prims, seed=seed)


def default_scene(kind: str = "line") -> SceneSpec:
    return hall_scene() if kind == "loop" else corridor_scene()


def scene_to_dict(scene: SceneSpec) -> dict:
    room = scene.room
    prims = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            prims.append({"type": "sphere", "center": list(p.center), "radius": p.radius,
                          "color": list(p.color)})
        else:
            prims.append({"type": "box", "min": list(p.min), "max": list(p.max), "color": list(p.color)})
    r = {"shape": room.shape, "checker": room.checker,
         "wall_colors": [list(c) for c in room.wall_colors]}
    if room.shape == "box":
        r.update(min=list(room.min), max=list(room.max))
    else:
        r.update(center=list(room.center), radius=room.radius)
    return {"room": r, "primitives": prims, "seed": scene.seed}


def _vec(obj, key, where, n=3):
    if key not in obj:
        raise DataError(f"{where}.{key}: missing")
    v = obj[key]
    if not isinstance(v, list) or len(v) != n or not all(isinstance(x, (int, float)) for x in v):
        raise DataError(f"{where}.{key}: expected a list of {n} numbers")
    return tuple(float(x) for x in v)


def _num(obj, key, where, default=None):
    if key not in obj:
        if default is None:
            raise DataError(f"{where}.{key}: missing")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise DataError(f"{where}.{key}: expected a number")
    return float(v)


def scene_from_dict(doc) -> SceneSpec:
    """Parse the JSON form; errors name the offending key path."""
    if not isinstance(doc, dict):
        raise DataError("scene: expected a JSON object")
    rd = doc.get("room", {})
    if not isinstance(rd, dict):
        raise DataError("scene.room: expected an object")
    shape = rd.get("shape", "box")
    kw = {"shape": shape, "checker": _num(rd, "checker", "scene.room", 0.5)}
    if "wall_colors" in rd:
        wc = rd["wall_colors"]
        if not isinstance(wc, list) or not wc:
            raise DataError("scene.room.wall_colors: expected a non-empty list")
        kw["wall_colors"] = tuple(_vec({"c": c}, "c", f"scene.room.wall_colors[{i}]") for i, c in enumerate(wc))
    if shape == "box":
        kw["min"] = _vec(rd, "min", "scene.room")
        kw["max"] = _vec(rd, "max", "scene.room")
    elif shape == "sphere":
        kw["center"] = _vec(rd, "center", "scene.room")
        kw["radius"] = _num(rd, "radius", "scene.room")
    else:
        raise DataError(f"scene.room.shape: unknown shape {shape!r}")
    prims = []
    plist = doc.get("primitives", [])
    if not isinstance(plist, list):
        raise DataError("scene.primitives: expected a list")
    for i, pd in enumerate(plist):
        where = f"scene.primitives[{i}]"
        if not isinstance(pd, dict):
            raise DataError(f"{where}: expected an object")
        kind = pd.get("type")
        color = _vec(pd, "color", where) if "color" in pd else (0.6, 0.6, 0.6)
        if kind == "sphere":
            prims.append(Sphere(_vec(pd, "center", where), _num(pd, "radius", where), color))
        elif kind == "box":
            prims.append(Box(_vec(pd, "min", where), _vec(pd, "max", where), color))
        else:
            raise DataError(f"{where}.type: expected 'sphere' or 'box', got {kind!r}")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise DataError("scene.seed: expected an integer")
    try:
        return SceneSpec(room=Room(**kw), primitives=tuple(prims), seed=seed)
    except InvariantViolation as exc:
        raise DataError(f"scene: {exc}") from None


def load_scene(path) -> SceneSpec:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scene_from_dict(doc)

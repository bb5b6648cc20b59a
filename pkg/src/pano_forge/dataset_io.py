"""On-disk correspondence manifest (JSON lines, schema version 1).

Each line is one object with keys in this fixed order::

    schema_version  int, always 1
    video_id        string
    frame_a         {"timestamp_ms": int, "yaw": float, "pitch": float, "fov": float}
    frame_b         same shape, frame_a.timestamp_ms < frame_b.timestamp_ms
    rotation_wxyz   4 floats, unit quaternion (norm within 1e-6)
    translation_m   3 floats; meters when scale_state is "metric"
    mean_conf       float >= 0
    sigma           float > 0; 1 for records that are still raw
    provenance      "window" | "propagated"
    scale_state     "raw" | "metric"

Angles are radians. Floats are written with 9 significant digits (``%.9g``)
and no whitespace between tokens. Lines are sorted by (video_id,
frame_a.timestamp_ms, frame_b.timestamp_ms, frame_a.yaw, frame_b.yaw), so
equal record sets always produce identical bytes. Records quantize their
floats to 9 significant digits on construction, which makes
write -> read -> write byte-stable and read(write(x)) == x.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .correspondence_search import PROPAGATED, WINDOW, CorrespondenceRecord
from .errors import DataError, InvariantViolation
from .pose_estimation import RelativePose, ScaleState
from .projection import ViewAngles

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
KEY_ORDER = ("schema_version", "video_id", "frame_a", "frame_b", "rotation_wxyz", "translation_m",
             "mean_conf", "sigma", "provenance", "scale_state")
FRAME_KEYS = ("timestamp_ms", "yaw", "pitch", "fov")


def q9(x) -> float:
    """Round to the nearest float with a 9-significant-digit decimal form."""
    x = float(x)
    if not math.isfinite(x):
        raise InvariantViolation(f"non-finite value {x}")
    return float(f"{x:.9g}")


def _fmt(x: float) -> str:
    s = f"{x:.9g}"
    return "0" if s == "-0" else s


@dataclass(frozen=True)
class FrameRef:
    timestamp_ms: int
    yaw: float
    pitch: float
    fov: float

    def __post_init__(self):
        if isinstance(self.timestamp_ms, bool) or int(self.timestamp_ms) != self.timestamp_ms:
            raise InvariantViolation(f"timestamp_ms must be an integer, got {self.timestamp_ms!r}")
        if self.timestamp_ms < 0:
            raise InvariantViolation("timestamp_ms must be >= 0")
        object.__setattr__(self, "timestamp_ms", int(self.timestamp_ms))
        for name in ("yaw", "pitch", "fov"):
            object.__setattr__(self, name, q9(getattr(self, name)))
        if not (0 < self.fov < math.pi):
            raise InvariantViolation(f"fov {self.fov} outside (0, pi)")

    @classmethod
    def from_angles(cls, ts, angles: ViewAngles) -> "FrameRef":
        return cls(int(ts), angles.yaw, angles.pitch, angles.fov)

    def angles(self) -> ViewAngles:
        return ViewAngles(self.pitch, self.yaw, self.fov)


@dataclass(frozen=True)
class ManifestRecord:
    video_id: str
    frame_a: FrameRef
    frame_b: FrameRef
    rotation_wxyz: tuple
    translation_m: tuple
    mean_conf: float
    sigma: float
    provenance: str = WINDOW
    scale_state: str = ScaleState.METRIC.value
    schema_version: int = field(default=SCHEMA_VERSION)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise InvariantViolation(f"unknown schema_version {self.schema_version!r}")
        if not isinstance(self.video_id, str) or not self.video_id:
            raise InvariantViolation("video_id must be a non-empty string")
        q = tuple(q9(v) for v in self.rotation_wxyz)
        t = tuple(q9(v) for v in self.translation_m)
        if len(q) != 4 or len(t) != 3:
            raise InvariantViolation("rotation_wxyz needs 4 values and translation_m 3")
        norm = math.sqrt(sum(v * v for v in q))
        if abs(norm - 1.0) > 1e-6:
            raise InvariantViolation(f"rotation quaternion norm {norm:.9g} is not 1")
        object.__setattr__(self, "rotation_wxyz", q)
        object.__setattr__(self, "translation_m", t)
        object.__setattr__(self, "mean_conf", q9(self.mean_conf))
        object.__setattr__(self, "sigma", q9(self.sigma))
        if self.mean_conf < 0:
            raise InvariantViolation("mean_conf must be >= 0")
        if not self.sigma > 0:
            raise InvariantViolation("sigma must be > 0")
        if self.frame_a.timestamp_ms >= self.frame_b.timestamp_ms:
            raise InvariantViolation("frame_a.timestamp_ms must be < frame_b.timestamp_ms")
        if self.provenance not in (WINDOW, PROPAGATED):
            raise InvariantViolation(f"unknown provenance {self.provenance!r}")
        if self.scale_state not in (ScaleState.RAW.value, ScaleState.METRIC.value):
            raise InvariantViolation(f"unknown scale_state {self.scale_state!r}")

    @property
    def sort_key(self):
        return (self.video_id, self.frame_a.timestamp_ms, self.frame_b.timestamp_ms,
                self.frame_a.yaw, self.frame_b.yaw)

    def to_line(self) -> str:
        def frame(f):
            return "{" + ",".join(f'"{k}":' + (str(f.timestamp_ms) if k == "timestamp_ms" else _fmt(getattr(f, k)))
                                  for k in FRAME_KEYS) + "}"

        parts = [
            f'"schema_version":{self.schema_version}',
            f'"video_id":{json.dumps(self.video_id)}',
            f'"frame_a":{frame(self.frame_a)}',
            f'"frame_b":{frame(self.frame_b)}',
            '"rotation_wxyz":[' + ",".join(_fmt(v) for v in self.rotation_wxyz) + "]",
            '"translation_m":[' + ",".join(_fmt(v) for v in self.translation_m) + "]",
            f'"mean_conf":{_fmt(self.mean_conf)}',
            f'"sigma":{_fmt(self.sigma)}',
            f'"provenance":{json.dumps(self.provenance)}',
            f'"scale_state":{json.dumps(self.scale_state)}',
        ]
        return "{" + ",".join(parts) + "}"

    @classmethod
    def from_obj(cls, obj) -> "ManifestRecord":
        if not isinstance(obj, dict):
            raise InvariantViolation("record must be a JSON object")
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise InvariantViolation(f"unknown schema_version {obj.get('schema_version')!r}")
        missing = [k for k in KEY_ORDER if k not in obj]
        extra = [k for k in obj if k not in KEY_ORDER]
        if missing or extra:
            raise InvariantViolation(f"missing keys {missing}, unexpected keys {extra}")

        def frame(o, name):
            if not isinstance(o, dict) or sorted(o) != sorted(FRAME_KEYS):
                raise InvariantViolation(f"{name} must have keys {list(FRAME_KEYS)}")
            if not isinstance(o["timestamp_ms"], int):
                raise InvariantViolation(f"{name}.timestamp_ms must be an integer")
            return FrameRef(o["timestamp_ms"], _num(o["yaw"]), _num(o["pitch"]), _num(o["fov"]))

        return cls(
            video_id=obj["video_id"],
            frame_a=frame(obj["frame_a"], "frame_a"),
            frame_b=frame(obj["frame_b"], "frame_b"),
            rotation_wxyz=tuple(_num(v) for v in _list(obj["rotation_wxyz"], "rotation_wxyz")),
            translation_m=tuple(_num(v) for v in _list(obj["translation_m"], "translation_m")),
            mean_conf=_num(obj["mean_conf"]),
            sigma=_num(obj["sigma"]),
            provenance=obj["provenance"],
            scale_state=obj["scale_state"],
            schema_version=obj["schema_version"],
        )


def _num(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise InvariantViolation(f"expected a number, got {v!r}")
    return float(v)


def _list(v, name):
    if not isinstance(v, list):
        raise InvariantViolation(f"{name} must be a list")
    return v


# ---------------------------------------------------------------------------
# conversions


def from_correspondence(rec: CorrespondenceRecord) -> ManifestRecord:
    metric = rec.pose.scale_state is ScaleState.METRIC
    return ManifestRecord(
        video_id=rec.video_id,
        frame_a=FrameRef.from_angles(rec.ts_a, rec.angles_a),
        frame_b=FrameRef.from_angles(rec.ts_b, rec.angles_b),
        rotation_wxyz=tuple(rec.pose.rotation),
        translation_m=tuple(rec.pose.translation),
        mean_conf=rec.mean_conf,
        sigma=rec.sigma if metric else 1.0,
        provenance=rec.provenance,
        scale_state=rec.pose.scale_state.value,
    )


def to_correspondence(m: ManifestRecord) -> CorrespondenceRecord:
    q = np.asarray(m.rotation_wxyz, dtype=float)
    state = ScaleState(m.scale_state)
    return CorrespondenceRecord(
        video_id=m.video_id,
        ts_a=m.frame_a.timestamp_ms,
        ts_b=m.frame_b.timestamp_ms,
        angles_a=m.frame_a.angles(),
        angles_b=m.frame_b.angles(),
        pose=RelativePose(q / np.linalg.norm(q), np.asarray(m.translation_m, dtype=float), state),
        mean_conf=m.mean_conf,
        sigma=m.sigma if state is ScaleState.METRIC else None,
        provenance=m.provenance,
    )


# ---------------------------------------------------------------------------
# files


def _coerce(records):
    out = []
    for k, r in enumerate(records):
        try:
            out.append(from_correspondence(r) if isinstance(r, CorrespondenceRecord) else r)
        except InvariantViolation as exc:
            raise InvariantViolation(f"record {k}: {exc}") from exc
        if not isinstance(out[-1], ManifestRecord):
            raise InvariantViolation(f"record {k}: not a manifest record ({type(r).__name__})")
    return out


def dumps_manifest(records) -> str:
    lines = sorted((r.sort_key, r.to_line()) for r in _coerce(records))
    return "".join(line + "\n" for _, line in lines)


def write_manifest(records, path):
    """Write records (manifest or correspondence records) canonically.

    The file is written to a temporary sibling and renamed into place.
    """
    text = dumps_manifest(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def loads_manifest(text: str, name="<manifest>") -> list[ManifestRecord]:
    out = []
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{name}:{n}: parse error: {exc.msg} at column {exc.colno}") from exc
        try:
            out.append(ManifestRecord.from_obj(obj))
        except (InvariantViolation, TypeError, ValueError) as exc:
            raise DataError(f"{name}:{n}: {exc}") from exc
    return out


def read_manifest(path) -> list[ManifestRecord]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return loads_manifest(text, str(path))


def frame_path(frames_root, video_id: str, timestamp_ms: int) -> Path:
    return Path(frames_root) / video_id / f"{int(timestamp_ms)}.png"


@dataclass
class ValidationReport:
    ok: int = 0
    missing: list = field(default_factory=list)
    corrupt: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.missing and not self.corrupt

    def to_dict(self):
        return {"ok": self.ok, "missing": len(self.missing), "corrupt": len(self.corrupt),
                "missing_files": [str(p) for p in self.missing],
                "corrupt_files": [str(p) for p in self.corrupt]}


def validate_manifest(path, frames_root) -> ValidationReport:
    """Check that every frame the manifest references exists and decodes."""
    records = read_manifest(path)
    frames = sorted({(r.video_id, f.timestamp_ms) for r in records for f in (r.frame_a, r.frame_b)})
    report = ValidationReport()
    for vid, ts in frames:
        p = frame_path(frames_root, vid, ts)
        if not p.is_file():
            report.missing.append(p)
            continue
        try:
            with Image.open(p) as im:
                im.load()
        except (OSError, SyntaxError, ValueError) as exc:
            logger.debug("corrupt frame %s: %s", p, exc)
            report.corrupt.append(p)
            continue
        report.ok += 1
    return report

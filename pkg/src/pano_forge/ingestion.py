"""Video catalog handling: format filtering, thumbnail dedup, frame
extraction through an external decoder, and corpus statistics."""

from __future__ import annotations

import json
import logging
import re
import shlex
import subprocess
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, EstimatorError, InvariantViolation

logger = logging.getLogger(__name__)

EQUIRECTANGULAR = "equirectangular"
OTHER = "other"
PROJECTION_FORMATS = (EQUIRECTANGULAR, OTHER)

# bucket edges in minutes; the last bucket is open-ended
DURATION_EDGES_MIN = (0.0, 1.0, 5.0, 10.0, 30.0)
DEFAULT_HAMMING_MAX = 10
DEFAULT_DECODER_CMD = "ffmpeg -loglevel error -i {input} -vf fps={fps} -frame_pts 1 {outdir}/%d.png"
MAX_DECODER_PROCS = 2

_FRAME_NAME = re.compile(r"^(\d+)\.png$")


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    duration_s: float
    category: str = ""
    projection_format: str = EQUIRECTANGULAR
    view_count: int = 0
    language: str | None = None

    def __post_init__(self):
        if not isinstance(self.video_id, str) or not self.video_id:
            raise InvariantViolation("video_id must be a non-empty string")
        if not (isinstance(self.duration_s, (int, float)) and np.isfinite(self.duration_s)
                and self.duration_s >= 0):
            raise InvariantViolation(f"{self.video_id}: duration_s must be a finite number >= 0")
        if self.projection_format not in PROJECTION_FORMATS:
            raise InvariantViolation(f"{self.video_id}: projection_format must be one of {PROJECTION_FORMATS}")
        if not isinstance(self.view_count, int) or self.view_count < 0:
            raise InvariantViolation(f"{self.video_id}: view_count must be a nonnegative integer")


def read_catalog(path) -> list[VideoMeta]:
    """Parse a JSON-lines catalog; blank lines are skipped."""
    out, seen = [], set()
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read catalog {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise DataError("expected a JSON object")
            meta = VideoMeta(**obj)
        except (json.JSONDecodeError, TypeError, DataError) as exc:
            raise DataError(f"{path}:{n}: {exc}") from exc
        if meta.video_id in seen:
            raise DataError(f"{path}:{n}: duplicate video_id {meta.video_id!r}")
        seen.add(meta.video_id)
        out.append(meta)
    return out


def write_catalog(catalog, path):
    with open(path, "w") as fh:
        for meta in catalog:
            fh.write(json.dumps(asdict(meta)) + "\n")


def filter_equirectangular(catalog):
    return [m for m in catalog if m.projection_format == EQUIRECTANGULAR]


# ---------------------------------------------------------------------------
# perceptual hashing


def _area_weights(n_src: int, n_dst: int) -> np.ndarray:
    """(n_dst, n_src) integer overlap lengths on a common grid of n_src * n_dst
    units; every row sums to n_src."""
    i = np.arange(n_src)
    j = np.arange(n_dst)[:, None]
    lo = np.maximum(i * n_dst, j * n_src)
    hi = np.minimum((i + 1) * n_dst, (j + 1) * n_src)
    return np.maximum(hi - lo, 0).astype(np.int64)


def perceptual_hash(image) -> int:
    """64-bit difference hash.

    Integer luma (299 R + 587 G + 114 B) is area-averaged to 9 x 8 cells
    with exact integer weights, then each bit records whether a cell is
    brighter than its right-hand neighbor. Because every cell carries the
    same total weight, a uniform brightness shift leaves the hash unchanged.
    """
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[..., :3]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise InvariantViolation(f"expected a gray or RGB raster, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InvariantViolation(f"degenerate image dims {img.shape[:2]}")
    img = img.astype(np.int64)
    gray = img if img.ndim == 2 else img @ np.array([299, 587, 114], dtype=np.int64)
    h, w = gray.shape
    cells = _area_weights(h, 8) @ gray @ _area_weights(w, 9).T
    bits = (cells[:, :-1] > cells[:, 1:]).ravel()
    return int(np.dot(bits.astype(np.uint64), np.left_shift(np.uint64(1), np.arange(64, dtype=np.uint64))))


def hamming(a: int, b: int) -> int:
    return bin(int(a) ^ int(b)).count("1")


def dedup(thumbs, hamming_max: int = DEFAULT_HAMMING_MAX):
    """Greedy first-wins dedup of ``(video_id, image)`` pairs.

    A video is kept iff its hash is farther than ``hamming_max`` from every
    hash kept before it.
    """
    kept, hashes = [], []
    for vid, img in thumbs:
        h = perceptual_hash(img)
        if all(hamming(h, k) > hamming_max for k in hashes):
            kept.append(vid)
            hashes.append(h)
        else:
            logger.info("dropping near-duplicate video %s", vid)
    return kept


# ---------------------------------------------------------------------------
# statistics


@dataclass
class CatalogStats:
    video_count: int = 0
    total_frames: int = 0
    frames_per_video_mean: float = 0.0
    duration_edges_min: list = field(default_factory=lambda: list(DURATION_EDGES_MIN))
    duration_counts: list = field(default_factory=lambda: [0] * len(DURATION_EDGES_MIN))
    category_counts: dict = field(default_factory=dict)
    correspondence_count: int = 0

    def to_dict(self):
        return asdict(self)


def duration_bucket(duration_s: float, edges=DURATION_EDGES_MIN) -> int:
    minutes = duration_s / 60.0
    return int(np.searchsorted(np.asarray(edges), minutes, side="right") - 1)


def compute_stats(catalog, records, edges=DURATION_EDGES_MIN) -> CatalogStats:
    """Aggregate corpus statistics.

    ``records`` are manifest records (anything with ``video_id``,
    ``frame_a.timestamp_ms`` and ``frame_b.timestamp_ms``). Frames count
    once per unique ``(video_id, timestamp)``; the per-video mean is over
    all catalog videos.
    """
    ids = {m.video_id for m in catalog}
    frames = set()
    for k, r in enumerate(records):
        if r.video_id not in ids:
            raise DataError(f"manifest record {k} references unknown video {r.video_id!r}")
        frames.add((r.video_id, r.frame_a.timestamp_ms))
        frames.add((r.video_id, r.frame_b.timestamp_ms))
    counts = [0] * len(edges)
    for m in catalog:
        counts[duration_bucket(m.duration_s, edges)] += 1
    n = len(catalog)
    return CatalogStats(
        video_count=n,
        total_frames=len(frames),
        frames_per_video_mean=len(frames) / n if n else 0.0,
        duration_edges_min=list(edges),
        duration_counts=counts,
        category_counts=dict(sorted(Counter(m.category for m in catalog).items())),
        correspondence_count=len(records),
    )


# ---------------------------------------------------------------------------
# frame extraction


def validate_frame_dir(frame_dir) -> list[tuple[int, Path]]:
    """Check an extracted frame directory; returns ``[(timestamp_ms, path)]``
    sorted by timestamp.

    Every file must be named ``{timestamp_ms}.png``, decode as PNG, and have
    width equal to twice its height.
    """
    d = Path(frame_dir)
    if not d.is_dir():
        raise DataError(f"frame directory {d} does not exist")
    out = []
    for p in sorted(d.iterdir()):
        m = _FRAME_NAME.match(p.name)
        if m is None:
            raise DataError(f"{p}: frame files must be named <timestamp_ms>.png")
        try:
            with Image.open(p) as im:
                fmt, (w, h) = im.format, im.size
        except OSError as exc:
            raise DataError(f"{p}: unreadable image ({exc})") from exc
        if fmt != "PNG":
            raise DataError(f"{p}: expected PNG, got {fmt}")
        if w != 2 * h:
            raise DataError(f"{p}: aspect violation, {w}x{h} is not 2:1 equirectangular")
        out.append((int(m.group(1)), p))
    out.sort(key=lambda e: e[0])
    return out


def decoder_argv(template: str, video_path, fps: float, out_dir) -> list[str]:
    """Split ``template`` and substitute ``{input}``, ``{fps}``, ``{outdir}``."""
    subs = {"input": str(video_path), "fps": f"{fps:g}", "outdir": str(out_dir)}
    try:
        return [tok.format(**subs) for tok in shlex.split(template)]
    except (KeyError, IndexError, ValueError) as exc:
        raise DataError(f"bad decoder_cmd template {template!r}: {exc}") from exc


def extract_frames(video_path, out_dir, fps: float = 1.0, decoder_cmd: str = DEFAULT_DECODER_CMD,
                   timeout: float | None = None):
    """Run the external decoder for one video and validate what it wrote."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    argv = decoder_argv(decoder_cmd, video_path, fps, out)
    logger.info("decoding %s: %s", video_path, " ".join(argv))
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except FileNotFoundError as exc:
        raise EstimatorError(f"decoder not found: {argv[0]}") from exc
    except subprocess.TimeoutExpired as exc:
        raise EstimatorError(f"decoder timed out on {video_path}") from exc
    if proc.returncode != 0:
        raise EstimatorError(f"decoder exited {proc.returncode} on {video_path}: {proc.stderr.strip()}")
    return validate_frame_dir(out)


def extract_many(jobs, fps: float = 1.0, decoder_cmd: str = DEFAULT_DECODER_CMD,
                 max_procs: int = MAX_DECODER_PROCS):
    """Extract ``[(video_path, out_dir)]`` with at most ``max_procs`` decoders
    running at once. Returns per-job results in input order: either the
    frame list or the exception that rejected the video."""

    def run(job):
        try:
            return extract_frames(job[0], job[1], fps, decoder_cmd)
        except (DataError, EstimatorError) as exc:
            logger.warning("rejecting %s: %s", job[0], exc)
            return exc

    with ThreadPoolExecutor(max_workers=max(1, int(max_procs))) as pool:
        return list(pool.map(run, list(jobs)))

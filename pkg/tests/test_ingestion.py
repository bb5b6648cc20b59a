import json
import sys
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pano_forge.dataset_io import FrameRef, ManifestRecord
from pano_forge.errors import DataError, EstimatorError, InvariantViolation
from pano_forge.ingestion import (
    DURATION_EDGES_MIN,
    VideoMeta,
    compute_stats,
    decoder_argv,
    dedup,
    extract_frames,
    extract_many,
    filter_equirectangular,
    hamming,
    perceptual_hash,
    read_catalog,
    validate_frame_dir,
    write_catalog,
)
from pano_forge.projection import load_png, save_png


def meta(vid, fmt="equirectangular", duration=120.0, category="travel"):
    return VideoMeta(vid, duration, category, fmt, 10)


def noise(seed, h=48, w=96):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


def manifest_record(video, ta, tb):
    return ManifestRecord(video, FrameRef(ta, 0.0, 0.0, np.pi / 2), FrameRef(tb, 0.0, 0.0, np.pi / 2),
                          (1.0, 0.0, 0.0, 0.0), (0.5, 0.0, 0.0), 5.0, 1.0, "window")


# --- catalog ----------------------------------------------------------------

def test_filter_examples():
    cat = [meta("a", "other"), meta("b"), meta("c", "other"), meta("d"), meta("e", "other")]
    assert [m.video_id for m in filter_equirectangular(cat)] == ["b", "d"]
    assert filter_equirectangular([]) == []
    eq = [meta("x"), meta("y")]
    assert filter_equirectangular(eq) == eq
    once = filter_equirectangular(cat)
    assert filter_equirectangular(once) == once


def test_catalog_round_trip(tmp_path):
    cat = [meta("a"), VideoMeta("b", 30.5, "sports", "other", 3, "en")]
    write_catalog(cat, tmp_path / "c.jsonl")
    assert read_catalog(tmp_path / "c.jsonl") == cat


def test_catalog_errors_name_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps({"video_id": "a", "duration_s": 1}) + "\n"
                 + json.dumps({"video_id": "b", "duration_s": -5}) + "\n")
    with pytest.raises(DataError, match=r"c\.jsonl:2"):
        read_catalog(p)
    p.write_text(json.dumps({"video_id": "a", "duration_s": 1}) + "\n"
                 + json.dumps({"video_id": "a", "duration_s": 2}) + "\n")
    with pytest.raises(DataError, match="duplicate"):
        read_catalog(p)
    p.write_text('{"video_id": "a", "duration_s": 1\n')
    with pytest.raises(DataError, match=r":1:"):
        read_catalog(p)


def test_video_meta_invariants():
    with pytest.raises(InvariantViolation):
        VideoMeta("", 1.0)
    with pytest.raises(InvariantViolation):
        VideoMeta("a", 1.0, projection_format="cubemap")


# --- hashing ----------------------------------------------------------------

def test_identical_images_hash_equal():
    img = noise(0)
    assert hamming(perceptual_hash(img), perceptual_hash(img.copy())) == 0


def test_brightness_shift_invariance():
    img = noise(1).astype(np.int64)
    img = np.clip(img, 0, 250)
    assert perceptual_hash(img) == perceptual_hash(img + 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 60), st.integers(9, 70), st.integers(9, 70))
def test_brightness_shift_invariance_any_size(seed, shift, h, w):
    img = np.random.default_rng(seed).integers(0, 256 - shift, (h, w, 3))
    assert perceptual_hash(img) == perceptual_hash(img + shift)


def test_lossless_reencode_invariance(tmp_path):
    img = noise(2)
    save_png(tmp_path / "t.png", img)
    assert perceptual_hash(load_png(tmp_path / "t.png")) == perceptual_hash(img)


def test_noise_hash_distance_centered():
    d = [hamming(perceptual_hash(noise(2 * k)), perceptual_hash(noise(2 * k + 1))) for k in range(100)]
    assert 24 <= np.median(d) <= 40


def test_hash_matches_naive_dhash():
    # float reference: area-average luma into 9 x 8 cells, compare neighbors
    img = noise(3, 40, 90)
    gray = img.astype(float) @ np.array([0.299, 0.587, 0.114])
    cells = gray.reshape(8, 5, 9, 10).mean(axis=(1, 3))
    bits = (cells[:, :-1] > cells[:, 1:]).ravel()
    expected = sum(1 << k for k, b in enumerate(bits) if b)
    assert perceptual_hash(img) == expected


def test_degenerate_image_rejected():
    with pytest.raises(InvariantViolation):
        perceptual_hash(np.zeros((0, 5, 3)))
    with pytest.raises(InvariantViolation):
        perceptual_hash(np.zeros((4, 4, 2)))


def test_dedup_examples():
    a, b = noise(10), noise(11)
    a_dup = a.copy()
    assert dedup([("A", a), ("A2", a_dup)]) == ["A"]
    assert dedup([("A", a), ("A2", a_dup), ("B", b)]) == ["A", "B"]
    distinct = [(f"v{k}", noise(100 + k)) for k in range(30)]
    kept = dedup(distinct)
    assert kept == [v for v, _ in distinct]
    again = dedup([(v, img) for v, img in distinct if v in kept])
    assert again == kept


# --- statistics -------------------------------------------------------------

def test_stats_mean_example():
    cat = [meta("a"), meta("b")]
    recs = [manifest_record("a", 0, 1000), manifest_record("a", 1000, 2000),
            manifest_record("b", 0, 1000), manifest_record("b", 2000, 3000), manifest_record("b", 3000, 4000)]
    s = compute_stats(cat, recs)
    assert s.total_frames == 8 and s.frames_per_video_mean == 4.0
    assert s.correspondence_count == 5


def test_stats_empty():
    s = compute_stats([], [])
    assert s.video_count == s.total_frames == s.correspondence_count == 0
    assert s.duration_counts == [0] * len(DURATION_EDGES_MIN)
    assert s.category_counts == {}


def test_stats_dangling_reference():
    with pytest.raises(DataError, match="unknown video"):
        compute_stats([meta("a")], [manifest_record("zz", 0, 1000)])


def test_stats_match_recount():
    rng = np.random.default_rng(5)
    cats = ["travel", "sports", "nature", "city"]
    catalog = [meta(f"v{k:03d}", duration=float(rng.uniform(0, 3600)), category=cats[rng.integers(4)])
               for k in range(100)]
    recs = []
    for _ in range(600):
        v = catalog[rng.integers(100)].video_id
        ta = int(rng.integers(0, 50)) * 1000
        recs.append(manifest_record(v, ta, ta + int(rng.integers(1, 20)) * 1000))
    s = compute_stats(catalog, recs)

    # single-pass recount with plain dictionaries
    frames = defaultdict(set)
    for r in recs:
        frames[r.video_id] |= {r.frame_a.timestamp_ms, r.frame_b.timestamp_ms}
    total = sum(len(f) for f in frames.values())
    buckets = [0, 0, 0, 0, 0]
    per_cat = {}
    for m in catalog:
        minutes = m.duration_s / 60
        idx = 0 if minutes < 1 else 1 if minutes < 5 else 2 if minutes < 10 else 3 if minutes < 30 else 4
        buckets[idx] += 1
        per_cat[m.category] = per_cat.get(m.category, 0) + 1
    assert s.video_count == 100
    assert s.total_frames == total
    assert s.frames_per_video_mean == pytest.approx(total / 100)
    assert s.duration_counts == buckets and sum(s.duration_counts) == 100
    assert s.category_counts == per_cat
    assert s.correspondence_count == 600
    json.dumps(s.to_dict())


# --- frame directories and extraction ---------------------------------------

def write_frames(d, names, size=(8, 16)):
    d.mkdir(parents=True, exist_ok=True)
    for n in names:
        save_png(d / n, np.zeros((*size, 3), dtype=np.uint8))


def test_valid_frame_dir(tmp_path):
    write_frames(tmp_path / "v", ["2000.png", "0.png", "1000.png"])
    assert [ts for ts, _ in validate_frame_dir(tmp_path / "v")] == [0, 1000, 2000]


def test_aspect_violation_names_file(tmp_path):
    write_frames(tmp_path / "v", ["0.png", "1000.png"])
    save_png(tmp_path / "v" / "2000.png", np.zeros((12, 16, 3), dtype=np.uint8))
    with pytest.raises(DataError, match=r"2000\.png.*aspect"):
        validate_frame_dir(tmp_path / "v")


def test_naming_violation(tmp_path):
    write_frames(tmp_path / "v", ["0.png", "frame_1.png"])
    with pytest.raises(DataError, match="frame_1.png"):
        validate_frame_dir(tmp_path / "v")


def test_non_png_rejected(tmp_path):
    (tmp_path / "v").mkdir()
    Image.fromarray(np.zeros((8, 16, 3), dtype=np.uint8)).save(tmp_path / "v" / "0.png", format="JPEG")
    with pytest.raises(DataError, match="expected PNG"):
        validate_frame_dir(tmp_path / "v")


FAKE_DECODER = """
import sys
import numpy as np
from PIL import Image
src, fps, out = sys.argv[1], float(sys.argv[2]), sys.argv[3]
if "broken" in src:
    sys.stderr.write("cannot decode")
    sys.exit(1)
h = 6 if "square" in src else 8
for k in range(3):
    Image.fromarray(np.zeros((h, 16, 3), dtype=np.uint8)).save(f"{out}/{int(k * 1000 / fps)}.png")
"""


@pytest.fixture
def decoder(tmp_path):
    script = tmp_path / "fake_decoder.py"
    script.write_text(FAKE_DECODER)
    return f"{sys.executable} {script} {{input}} {{fps}} {{outdir}}"


def test_decoder_argv_substitution():
    argv = decoder_argv("dec -i {input} -r {fps} {outdir}/%d.png", "in.mp4", 2.0, "out")
    assert argv == ["dec", "-i", "in.mp4", "-r", "2", "out/%d.png"]
    with pytest.raises(DataError):
        decoder_argv("dec {nope}", "in.mp4", 1.0, "out")


def test_extract_with_fake_decoder(tmp_path, decoder):
    frames = extract_frames("good.mp4", tmp_path / "out", fps=2.0, decoder_cmd=decoder)
    assert [ts for ts, _ in frames] == [0, 500, 1000]


def test_extract_failures(tmp_path, decoder):
    with pytest.raises(EstimatorError, match="cannot decode"):
        extract_frames("broken.mp4", tmp_path / "a", decoder_cmd=decoder)
    with pytest.raises(DataError, match="aspect"):
        extract_frames("square.mp4", tmp_path / "b", decoder_cmd=decoder)
    with pytest.raises(EstimatorError, match="not found"):
        extract_frames("x.mp4", tmp_path / "c", decoder_cmd="no-such-decoder-binary {input}")


def test_extract_many_keeps_order(tmp_path, decoder):
    jobs = [(f"{name}.mp4", tmp_path / name) for name in ("one", "broken", "two", "square")]
    out = extract_many(jobs, decoder_cmd=decoder, max_procs=2)
    assert isinstance(out[0], list) and isinstance(out[2], list)
    assert isinstance(out[1], EstimatorError) and isinstance(out[3], DataError)

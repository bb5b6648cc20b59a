import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pano_forge import synth
from pano_forge.errors import DataError, InvariantViolation
from pano_forge.projection import (
    CARDINAL_YAWS,
    PanoFrame,
    ViewAngles,
    cardinal_views,
    dir_to_equirect_uv,
    equirect_uv_to_dir,
    load_pano,
    project,
    rotation_from_angles,
    sample_bilinear,
    save_png,
    to_uint8,
)


def psnr(a, b):
    mse = np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2)
    return 10 * np.log10(1.0 / mse)


def noise_pano(h=64, seed=0):
    rng = np.random.default_rng(seed)
    return PanoFrame("v", 0, rng.integers(0, 256, (h, 2 * h, 3), dtype=np.uint8))


# --- uv <-> direction -------------------------------------------------------

def test_center_is_forward():
    np.testing.assert_allclose(equirect_uv_to_dir(0.5, 0.5), [1, 0, 0], atol=1e-15)


def test_top_row_is_zenith():
    np.testing.assert_allclose(equirect_uv_to_dir(0.5, 0.0), [0, 0, 1], atol=1e-15)


def test_forward_maps_to_center():
    assert dir_to_equirect_uv([1.0, 0.0, 0.0]) == pytest.approx((0.5, 0.5), abs=1e-15)


def test_nadir_uses_pole_convention():
    u, v = dir_to_equirect_uv([0.0, 0.0, -1.0])
    assert u == 0.5 and v == 1.0


def test_backward_wraps_to_zero():
    u, v = dir_to_equirect_uv([-1.0, 0.0, 0.0])
    assert u == pytest.approx(0.0, abs=1e-15) and v == pytest.approx(0.5)


def test_uv_range_checked():
    with pytest.raises(ValueError):
        equirect_uv_to_dir(1.0, 0.5)
    with pytest.raises(ValueError):
        equirect_uv_to_dir(0.2, 1.5)


def test_zero_direction_rejected():
    with pytest.raises(ValueError):
        dir_to_equirect_uv([0.0, 0.0, 0.0])


@settings(max_examples=300, deadline=None)
@given(st.floats(0.0, 1.0, exclude_max=True), st.floats(1e-6, 1 - 1e-6))
def test_uv_round_trip(u, v):
    u2, v2 = dir_to_equirect_uv(equirect_uv_to_dir(u, v))
    assert abs(u2 - u) < 1e-12 or abs(abs(u2 - u) - 1.0) < 1e-12
    assert abs(v2 - v) < 1e-12


def test_uv_round_trip_all_pixel_centers():
    h, w = 256, 512
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(h) + 0.5) / h
    uu, vv = np.meshgrid(u, v)
    u2, v2 = dir_to_equirect_uv(equirect_uv_to_dir(uu, vv))
    assert np.max(np.abs(u2 - uu)) < 1e-12 and np.max(np.abs(v2 - vv)) < 1e-12


# --- angles and rotations ---------------------------------------------------

def test_zero_angles_give_identity():
    np.testing.assert_allclose(rotation_from_angles(ViewAngles(0, 0)), np.eye(3), atol=1e-15)


def test_yaw_pi_points_backward():
    R = rotation_from_angles(ViewAngles(0.0, np.pi))
    np.testing.assert_allclose(R @ [1, 0, 0], [-1, 0, 0], atol=1e-15)


def test_positive_pitch_looks_up():
    R = rotation_from_angles(ViewAngles(0.3, 0.0))
    assert (R @ [1, 0, 0])[2] == pytest.approx(np.sin(0.3))


def test_rotations_orthonormal():
    rng = np.random.default_rng(3)
    for _ in range(100):
        R = rotation_from_angles(ViewAngles(rng.uniform(-np.pi / 2, np.pi / 2), rng.uniform(0, 2 * np.pi)))
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-12
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_view_angles_validation():
    assert ViewAngles(0.0, -0.5 * np.pi).yaw == pytest.approx(1.5 * np.pi)
    assert ViewAngles(0.0, 2 * np.pi).yaw == 0.0
    with pytest.raises(InvariantViolation):
        ViewAngles(2.0, 0.0)
    with pytest.raises(InvariantViolation):
        ViewAngles(0.0, 0.0, np.pi)
    with pytest.raises(InvariantViolation):
        ViewAngles(0.0, np.nan)


@given(st.floats(-1e6, 1e6))
def test_yaw_always_normalized(yaw):
    y = ViewAngles(0.0, yaw).yaw
    assert 0.0 <= y < 2 * np.pi


# --- sampling and projection ------------------------------------------------

def test_bilinear_wraps_horizontally():
    img = np.zeros((4, 8, 1))
    img[:, 0] = 1.0
    # just left of u = 1, half-way between the last column's center and column 0
    val = sample_bilinear(img, 1.0 - 0.25 / 8, 0.5)
    assert 0.0 < val[0] < 1.0
    assert val[0] == pytest.approx(0.25)


def test_bilinear_exact_at_pixel_centers():
    img = np.random.default_rng(0).uniform(size=(6, 12, 3))
    u = (np.arange(12) + 0.5) / 12
    v = (np.arange(6) + 0.5) / 6
    uu, vv = np.meshgrid(u, v)
    np.testing.assert_allclose(sample_bilinear(img, uu, vv), img, atol=1e-14)


def test_constant_pano_gives_constant_views():
    pano = PanoFrame("v", 0, np.full((32, 64, 3), 77, dtype=np.uint8))
    views = cardinal_views(pano, out_h=16, out_w=16)
    assert len(views) == 4
    for view in views:
        assert np.all(view.image == views[0].image)
        np.testing.assert_allclose(view.image, 77 / 255, atol=1e-6)
    view = project(pano, ViewAngles(0.7, 4.0, 1.2), 10, 20)
    np.testing.assert_allclose(view.image, 77 / 255, atol=1e-6)


def test_cardinal_view_yaws():
    views = cardinal_views(noise_pano(), out_h=8, out_w=8)
    assert [v.angles.yaw for v in views] == list(CARDINAL_YAWS)
    assert all(v.angles.pitch == 0.0 for v in views)


def test_projection_deterministic():
    pano = noise_pano()
    a = ViewAngles(0.2, 1.0)
    assert np.array_equal(project(pano, a, 24, 24).image, project(pano, a, 24, 24).image)


def test_deferred_matches_eager():
    pano = noise_pano()
    a = ViewAngles(-0.3, 2.0, 1.0)
    lazy = project(pano, a, 12, 18, deferred=True)
    assert lazy.shape == (12, 18)
    assert np.array_equal(lazy.image, project(pano, a, 12, 18).image)


def test_degenerate_output_rejected():
    with pytest.raises(ValueError):
        project(noise_pano(), ViewAngles(), 0, 4)


def test_yaw_rotation_cycles_cardinal_views():
    # columns per quarter turn must be an integer for an exact shift
    pano = noise_pano(64)
    w = pano.image.shape[1]
    # rolling columns left by a quarter turn moves what was at yaw pi/2 to yaw 0
    rolled = PanoFrame("v", 0, np.roll(pano.image, -w // 4, axis=1))
    a = cardinal_views(pano, out_h=32, out_w=32)
    b = cardinal_views(rolled, out_h=32, out_w=32)
    for k in range(4):
        diff = np.max(np.abs(b[k].image - a[(k + 1) % 4].image))
        assert diff <= 2 / 255 + 1e-6


def test_yaw_equivariance_under_column_shift():
    pano = noise_pano(64)
    w = pano.image.shape[1]
    shift = 7
    phi0 = 2 * np.pi * shift / w
    rolled = PanoFrame("v", 0, np.roll(pano.image, shift, axis=1))
    a = project(pano, ViewAngles(0.1, 0.4), 20, 20).image
    b = project(rolled, ViewAngles(0.1, 0.4 + phi0), 20, 20).image
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_projection_psnr_against_direct_raycast():
    scene = synth.corridor_scene()
    cam = synth.make_trajectory(scene, 60, "line", 1.0)[10]
    pano = PanoFrame("v", 0, to_uint8(synth.render_equirect(scene, cam, 2048, 1024)[0]))
    rng = np.random.default_rng(0)
    scores = []
    for _ in range(20):
        a = ViewAngles(rng.uniform(-0.6, 0.6), rng.uniform(0, 2 * np.pi), np.pi / 2)
        ref = synth.render_perspective(scene, cam, a, 256, 256)[0]
        scores.append(psnr(project(pano, a, 256, 256).image, ref))
    assert min(scores) > 30.0, scores


# --- raster IO --------------------------------------------------------------

def test_load_pano_checks_name_and_aspect(tmp_path):
    img = np.zeros((8, 16, 3), dtype=np.uint8)
    save_png(tmp_path / "1500.png", img)
    pano = load_pano(tmp_path / "1500.png", "vid")
    assert pano.timestamp_ms == 1500 and pano.video_id == "vid"
    save_png(tmp_path / "frame.png", img)
    with pytest.raises(DataError, match="timestamp"):
        load_pano(tmp_path / "frame.png")
    save_png(tmp_path / "2000.png", np.zeros((12, 16, 3), dtype=np.uint8))
    with pytest.raises(DataError, match="W = 2H"):
        load_pano(tmp_path / "2000.png")
    (tmp_path / "3000.png").write_bytes(b"not a png")
    with pytest.raises(DataError, match="unreadable"):
        load_pano(tmp_path / "3000.png")


def test_pano_frame_invariants():
    with pytest.raises(InvariantViolation):
        PanoFrame("v", 0, np.zeros((8, 15, 3), dtype=np.uint8))
    with pytest.raises(InvariantViolation):
        PanoFrame("v", -1, np.zeros((8, 16, 3), dtype=np.uint8))

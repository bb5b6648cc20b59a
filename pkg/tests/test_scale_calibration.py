import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pano_forge.correspondence_search import CorrespondenceRecord, PairFailure
from pano_forge.errors import DataError, InvariantViolation, PairEvaluationError
from pano_forge.pose_estimation import (
    ConfidenceMap,
    PointMap,
    RelativePose,
    ScaleState,
    checked_estimate,
)
from pano_forge.projection import ViewAngles, project
from pano_forge.scale_calibration import (
    DepthMap,
    ScaleFit,
    calibrate_record,
    fit_scale,
    scale_objective,
    to_metric,
    weighted_median,
)

GRID = np.arange(0.1, 10.0 + 5e-5, 1e-4)


def grid_objective(ratios, weights, grid=GRID):
    """sum_i w_i |s - r_i| at every grid point, via sorted prefix sums."""
    order = np.argsort(ratios)
    r, w = ratios[order], weights[order]
    cw = np.concatenate([[0.0], np.cumsum(w)])
    cwr = np.concatenate([[0.0], np.cumsum(w * r)])
    k = np.searchsorted(r, grid, side="right")
    left = grid * cw[k] - cwr[k]
    right = (cwr[-1] - cwr[k]) - grid * (cw[-1] - cw[k])
    return left + right


def random_instance(rng, sigma=None, outlier_frac=None, h=None, w=None):
    h = h or int(rng.integers(1, 65))
    w = w or int(rng.integers(1, 65))
    sigma = rng.uniform(0.1, 10.0) if sigma is None else sigma
    frac = rng.uniform(0.0, 0.2) if outlier_frac is None else outlier_frac
    z = rng.uniform(0.5, 5.0, (h, w))
    depth = sigma * z * (1.0 + rng.uniform(-0.005, 0.005, (h, w)))
    conf = rng.uniform(0.5, 8.0, (h, w))
    bad = rng.uniform(size=(h, w)) < frac
    depth[bad] = rng.uniform(0.05, 60.0, bad.sum())
    conf[bad] = rng.uniform(0.02, 0.1, bad.sum())
    return z, depth, conf, sigma, bad


def grid_fit(z, depth, conf):
    valid = (z > 0) & (conf > 0.01)
    obj = grid_objective(depth[valid] / z[valid], conf[valid] * z[valid])
    return GRID[int(np.argmin(obj))]


def test_prefix_sum_oracle_matches_direct_sum():
    rng = np.random.default_rng(0)
    z, d, c, *_ = random_instance(rng, h=9, w=7)
    probe = np.array([0.1, 1.234, 5.0, 9.9])
    fast = grid_objective(d.ravel() / z.ravel(), (c * z).ravel(), probe)
    direct = [scale_objective(s, z, d, c) for s in probe]
    np.testing.assert_allclose(fast, direct, rtol=1e-10)


def test_identity_depth_gives_unit_scale():
    rng = np.random.default_rng(1)
    z = rng.uniform(0.5, 3, (8, 8))
    fit = fit_scale(PointMap(np.dstack([z, z, z])), DepthMap(z), ConfidenceMap(rng.uniform(0.1, 5, (8, 8))))
    assert fit.sigma == 1.0 and fit.objective == 0.0 and fit.valid_pixel_count == 64


def test_single_pixel():
    fit = fit_scale(np.array([[2.0]]), np.array([[6.0]]), np.array([[1.0]]))
    assert fit.sigma == 3.0


def test_thousand_pixels_with_outliers():
    rng = np.random.default_rng(2)
    z, d, c, sigma, _ = random_instance(rng, sigma=2.5, outlier_frac=0.2, h=40, w=25)
    fit = fit_scale(z, d, c)
    assert abs(fit.sigma - grid_fit(z, d, c)) <= 2e-4
    assert abs(fit.sigma - 2.5) / 2.5 < 0.01


@pytest.mark.parametrize("seed", range(10))
def test_matches_grid_search(seed):
    rng = np.random.default_rng(100 + seed)
    z, d, c, *_ = random_instance(rng)
    fit = fit_scale(z, d, c)
    g = grid_fit(z, d, c)
    assert abs(fit.sigma - g) <= 2e-4
    assert fit.objective <= scale_objective(g, z, d, c) + 1e-9


def test_weighted_median_ties_take_lower():
    assert weighted_median([1.0, 2.0], [1.0, 1.0]) == 1.0
    assert weighted_median([3.0, 1.0, 2.0], [1.0, 1.0, 2.0]) == 2.0
    with pytest.raises(ValueError):
        weighted_median([1.0], [0.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(0.01, 10)), min_size=1, max_size=30))
def test_weighted_median_minimizes_l1(items):
    v = np.array([a for a, _ in items])
    w = np.array([b for _, b in items])
    m = weighted_median(v, w)

    def f(x):
        return np.sum(w * np.abs(x - v))

    # a piecewise-linear convex function attains its minimum at a data point
    assert f(m) <= min(f(x) for x in v) + 1e-9 * max(1.0, f(m))


@pytest.mark.parametrize("k", [0.25, 2.0, 8.0])
def test_scale_equivariance_exact(k):
    rng = np.random.default_rng(3)
    z, d, c, *_ = random_instance(rng, h=20, w=20)
    base = fit_scale(z, d, c).sigma
    assert fit_scale(z, k * d, c).sigma == k * base
    assert fit_scale(k * z, d, c).sigma == base / k
    assert fit_scale(z, d, k * c).sigma == base


@pytest.mark.parametrize("k", [0.3, 3.0, 7.1])
def test_scale_equivariance_general(k):
    rng = np.random.default_rng(4)
    z, d, c, *_ = random_instance(rng, h=20, w=20)
    base = fit_scale(z, d, c).sigma
    assert fit_scale(z, k * d, c).sigma == pytest.approx(k * base, rel=1e-12)
    assert fit_scale(k * z, d, c).sigma == pytest.approx(base / k, rel=1e-12)
    assert fit_scale(z, d, k * c).sigma == pytest.approx(base, rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_robust_to_low_weight_corruption(seed):
    rng = np.random.default_rng(200 + seed)
    z, d, c, sigma, _ = random_instance(rng, outlier_frac=0.0, h=32, w=32)
    clean = fit_scale(z, d, c).sigma
    bad = rng.uniform(size=z.shape) < 0.2
    c2 = c.copy()
    c2[bad] = rng.uniform(0.02, 0.1, bad.sum())
    # keep the corrupted pixels' share of the weight at or below 10 percent
    assert (c2 * z)[bad].sum() <= 0.1 * (c2 * z).sum()
    d2 = d.copy()
    d2[bad] = rng.uniform(0.05, 60.0, bad.sum())
    assert abs(fit_scale(z, d2, c2).sigma - clean) / clean < 0.01


def test_invalid_pixels_are_ignored():
    z = np.array([[1.0, -1.0, 2.0]])
    d = np.array([[3.0, 100.0, 100.0]])
    c = np.array([[1.0, 5.0, 0.01]])
    fit = fit_scale(z, d, c)
    assert fit.sigma == 3.0 and fit.valid_pixel_count == 1


def test_fit_errors():
    with pytest.raises(DataError, match="no valid pixels"):
        fit_scale(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(InvariantViolation):
        fit_scale(np.ones((2, 2)), np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(InvariantViolation):
        fit_scale(np.full((2, 2), np.nan), np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(InvariantViolation):
        ScaleFit(0.0, 0.0, 1)


def test_to_metric():
    raw = RelativePose(np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 0]))
    m = to_metric(raw, 2.5)
    np.testing.assert_array_equal(m.translation, [2.5, 0, 0])
    np.testing.assert_array_equal(m.rotation, raw.rotation)
    assert m.scale_state is ScaleState.METRIC
    one = to_metric(raw, 1.0)
    np.testing.assert_array_equal(one.translation, raw.translation)
    with pytest.raises(InvariantViolation, match="already metric"):
        to_metric(m, 2.0)


# --- records ----------------------------------------------------------------

def accepted_records(line_search, limit):
    tasks, results, _ = line_search
    out = [(t, r.record) for t, r in zip(tasks, results) if not isinstance(r, PairFailure) and r.accepted]
    step = max(1, len(out) // limit)
    return out[::step][:limit]


def record_views(fixture, task, rec, size):
    i, j, _, _ = task
    va = project(fixture.panos[i], rec.angles_a, size, size, deferred=True)
    vb = project(fixture.panos[j], rec.angles_b, size, size, deferred=True)
    return va, vb


def test_calibrated_records_recover_planted_scale(line_fixture, line_search):
    est, depth = line_fixture.estimator(), line_fixture.depth_estimator()
    for task, rec in accepted_records(line_search, 10):
        va, vb = record_views(line_fixture, task, rec, 32)
        out = calibrate_record(rec, depth, checked_estimate(est, va, vb), va)
        assert out.sigma == pytest.approx(line_fixture.planted_scale, abs=1e-6)
        assert out.pose.scale_state is ScaleState.METRIC


def test_noisy_depth_scale_within_five_percent(line_fixture, line_search):
    est = line_fixture.estimator()
    depth = line_fixture.depth_estimator(noise_sigma=0.05, seed=11)
    sigmas = []
    for task, rec in accepted_records(line_search, 20):
        va, vb = record_views(line_fixture, task, rec, 32)
        sigmas.append(calibrate_record(rec, depth, checked_estimate(est, va, vb), va).sigma)
    assert len(sigmas) == 20
    assert abs(np.median(sigmas) - line_fixture.planted_scale) / line_fixture.planted_scale < 0.05


def test_calibrating_metric_record_fails(line_fixture, line_search):
    task, rec = accepted_records(line_search, 1)[0]
    va, vb = record_views(line_fixture, task, rec, 32)
    est = checked_estimate(line_fixture.estimator(), va, vb)
    metric = calibrate_record(rec, line_fixture.depth_estimator(), est, va)
    with pytest.raises(PairEvaluationError) as info:
        calibrate_record(metric, line_fixture.depth_estimator(), est, va)
    assert info.value.key == rec.key


def test_calibration_error_carries_record_identity():
    pose = RelativePose(np.array([1.0, 0, 0, 0]), np.ones(3))
    rec = CorrespondenceRecord("v", 0, 1000, ViewAngles(), ViewAngles(), pose, 5.0)

    class ZeroConf:
        confidence = ConfidenceMap(np.zeros((4, 4)))
        pointmap = PointMap(np.ones((4, 4, 3)))

    class Depth:
        def estimate_depth(self, view):
            return DepthMap(np.ones((4, 4)))

    class View:
        shape = (4, 4)

    with pytest.raises(PairEvaluationError) as info:
        calibrate_record(rec, Depth(), ZeroConf(), View())
    assert info.value.key == rec.key and info.value.exit_code == 2

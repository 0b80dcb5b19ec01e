import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hintmvs.cost_volume import CostVolume, DepthPlanes, build_cost_volume, make_planes
from hintmvs.estimator import EstimatorConfig, argmax_depth, estimate, extract_depth, regularize

from test_cost_volume import wall_pair


def volume(scores, valid=None):
    scores = np.asarray(scores, dtype=np.float64)
    if valid is None:
        valid = np.ones(scores.shape, dtype=np.int32)
    return CostVolume(scores, np.asarray(valid, dtype=np.int32))


def test_regularize_identity_and_constant():
    rng = np.random.default_rng(0)
    cv = volume(rng.uniform(size=(3, 6, 7)))
    assert regularize(cv, EstimatorConfig(box_filter_radius=0)) is cv
    const = volume(np.full((3, 6, 7), 0.4))
    np.testing.assert_allclose(regularize(const).scores, 0.4)


def test_regularize_impulse():
    s = np.zeros((1, 7, 7))
    s[0, 3, 3] = 1.0
    out = regularize(volume(s), EstimatorConfig(box_filter_radius=1)).scores[0]
    np.testing.assert_allclose(out[2:5, 2:5], 1 / 9)
    assert out.sum() == pytest.approx(1.0)


def test_regularize_ignores_invalid_cells():
    s = np.full((1, 3, 3), 0.5)
    s[0, 1, 1] = 100.0
    valid = np.ones((1, 3, 3))
    valid[0, 1, 1] = 0
    out = regularize(volume(s, valid), EstimatorConfig(box_filter_radius=1))
    np.testing.assert_allclose(out.scores[0][valid[0] > 0], 0.5)
    assert out.scores[0, 1, 1] == 0.0


def test_dominant_plane():
    planes = make_planes(16, 0.5, 5.0)
    s = -np.ones((16, 1, 1))
    s[6] = 1.0
    d = extract_depth(volume(s), planes).values[0, 0]
    assert d == pytest.approx(planes.values[6], rel=0.01)


def test_uniform_scores_mean_inverse_depth():
    planes = DepthPlanes(np.array([1.0, 1.6, 4.0]))
    d = extract_depth(volume(np.zeros((3, 1, 1))), planes).values[0, 0]
    assert d == pytest.approx(1.6, rel=1e-12)


def test_all_invalid_column():
    planes = make_planes(4, 1.0, 4.0)
    d, cert = estimate(volume(np.zeros((4, 2, 2)), np.zeros((4, 2, 2))), planes)
    assert np.all(d.values == -1) and np.all(cert == 0)


def test_min_valid_sources():
    planes = make_planes(4, 1.0, 4.0)
    s = np.array([0.0, 1.0, 0.0, 0.0]).reshape(4, 1, 1)
    cnt = np.full((4, 1, 1), 1)
    d = extract_depth(volume(s, cnt), planes, EstimatorConfig(min_valid_sources=2))
    assert d.values[0, 0] == -1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_shift_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    planes = make_planes(12, 0.4, 5.0)
    s = rng.uniform(-1, 1, size=(12, 3, 4))
    valid = rng.integers(0, 2, size=(12, 3, 4))
    a = extract_depth(volume(s, valid), planes).values
    b = extract_depth(volume(s + c, valid), planes).values
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_output_range(seed):
    rng = np.random.default_rng(seed)
    planes = make_planes(10, 0.3, 6.0)
    d, cert = estimate(volume(rng.uniform(-1, 1, size=(10, 4, 4))), planes)
    v = d.values[d.validity]
    assert np.all((v >= planes.d_min) & (v <= planes.d_max))
    assert np.all((cert >= 0) & (cert <= 1))


def test_refinement_beats_argmax_on_textured_plane():
    planes = make_planes()
    inv = 1 / planes.values
    step = abs(inv[1] - inv[0])
    d_star = 1 / ((inv[30] + inv[31]) / 2 + 0.2 * step)  # off-plane on purpose
    ref, src = wall_pair(d_star)
    cv = build_cost_volume(ref, [src], planes)
    ok = np.zeros(cv.shape[1:], dtype=bool)
    ok[2:-2, 2:-2] = True
    ok &= cv.valid_count[26:36].min(axis=0) > 0
    cfg = EstimatorConfig(box_filter_radius=0)
    refined = np.abs(1 / extract_depth(cv, planes, cfg).values - 1 / d_star)[ok]
    coarse = np.abs(1 / argmax_depth(cv, planes).values - 1 / d_star)[ok]
    assert np.median(coarse) <= step / 2 + 1e-12
    assert np.median(refined) < step / 4
    assert np.mean(refined) < np.mean(coarse)


def test_certainty_sharp_vs_flat():
    planes = make_planes(32, 0.5, 5.0)
    sharp = -np.ones((32, 1, 1))
    sharp[10] = 1.0
    _, c_sharp = estimate(volume(sharp), planes)
    _, c_flat = estimate(volume(np.zeros((32, 1, 1))), planes)
    assert c_sharp[0, 0] > 0.99
    assert c_flat[0, 0] == pytest.approx(2 / 32) or c_flat[0, 0] == pytest.approx(3 / 32)

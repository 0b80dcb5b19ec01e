import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hintmvs.cost_volume import CostVolume, build_cost_volume, make_planes
from hintmvs.estimator import argmax_depth
from hintmvs.geometry import ConfidenceMap, DepthMap, Pose
from hintmvs.hint import (
    AnalyticCombiner,
    HintMlp,
    HintMode,
    TrainConfig,
    TrainingItem,
    combine_analytic,
    combine_mlp,
    fuse_volume,
    hint_feature,
    mlp_gradients,
    sample_hint_mode,
    softargmax_log_loss,
    train_hint_mlp,
)
from hintmvs.pipeline import downsample_depth
from hintmvs.render import HintImages
from hintmvs.synth import SceneSpec, render_sequence, render_synthetic_frame

from conftest import small_room


def hint_images(depth, conf):
    return HintImages(DepthMap(np.asarray(depth, float)), ConfidenceMap(np.asarray(conf, float)))


def numeric_grad(f, params, eps=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            hi = f()
            p[idx] = old - eps
            lo = f()
            p[idx] = old
            g[idx] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def max_rel_error(a_list, b_list, floor=1e-6):
    worst = 0.0
    for a, b in zip(a_list, b_list):
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))))
    return worst


# --------------------------------------------------------------------------- features and combiners


def test_hint_feature_examples():
    h = hint_images([[1.2, -1.0, 1.0]], [[0.9, 0.7, 0.4]])
    assert hint_feature(1.0, h, (0, 0)) == pytest.approx((0.2, 0.9))
    assert hint_feature(1.0, h, (1, 0)) == (-1.0, 0.0)
    assert hint_feature(1.0, h, (2, 0)) == (0.0, 0.4)
    with pytest.raises(ValueError):
        hint_feature(0.0, h, (0, 0))


def test_combine_analytic_examples():
    assert combine_analytic(0.3, 0.5, 0.0) == 0.3
    assert combine_analytic(0.3, 0.0, 1.0, alpha=1.0) == pytest.approx(1.3)
    assert combine_analytic(0.3, 3 * 0.05, 1.0, sigma=0.05) == pytest.approx(0.3 + np.exp(-4.5), abs=1e-12)
    assert combine_analytic(0.3, 3 * 0.05, 1.0, sigma=0.05) == pytest.approx(0.3111, abs=1e-4)


def test_combine_analytic_monotone():
    delta = np.linspace(0, 0.5, 201)
    conf = np.linspace(0, 1, 101)
    f = combine_analytic(0.2, delta, 0.7, sigma=0.1)
    assert np.all(np.diff(f) <= 0)
    g = combine_analytic(0.2, 0.05, conf, sigma=0.1)
    assert np.all(np.diff(g) >= 0)


def test_combine_mlp_examples():
    z = HintMlp.zeros()
    z.biases[-1][:] = 0.37
    assert combine_mlp(z, 0.5, 0.1, 0.8) == 0.37
    mlp = HintMlp.initialize(seed=7, passthrough=False)
    x = np.array([0.5, 0.1, 0.8])
    h = x
    for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):  # independent forward pass
        h = sum(h[k] * W[k] for k in range(len(h))) + b
        if i < len(mlp.weights) - 1:
            h = np.where(h > 0, h, 0.0)
    assert combine_mlp(mlp, *x) == pytest.approx(h[0], rel=1e-12)
    rng = np.random.default_rng(0)
    batch = rng.uniform(size=(17, 3))
    singles = [combine_mlp(mlp, *row) for row in batch]
    np.testing.assert_allclose(combine_mlp(mlp, batch[:, 0], batch[:, 1], batch[:, 2]), singles, rtol=1e-12)


def test_passthrough_initialization():
    mlp = HintMlp.initialize(seed=3)
    s = np.linspace(-1, 1, 11)
    np.testing.assert_allclose(combine_mlp(mlp, s, 0.3, 0.9), s, atol=1e-12)


def test_mlp_validation_and_file_roundtrip(tmp_path):
    with pytest.raises(ValueError):
        HintMlp([np.zeros((4, 2))], [np.zeros(2)])
    with pytest.raises(ValueError):
        HintMlp([np.full((3, 1), np.nan)], [np.zeros(1)])
    mlp = HintMlp.initialize(seed=1)
    mlp.save(tmp_path / "m.bin")
    back = HintMlp.load(tmp_path / "m.bin")
    for a, b in zip(mlp.parameters(), back.parameters()):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        HintMlp.from_bytes(mlp.to_bytes()[:-3])


# --------------------------------------------------------------------------- fuse_volume


def random_volume(rng, D=8, H=6, W=7):
    return CostVolume(rng.uniform(-1, 1, size=(D, H, W)), rng.integers(1, 3, size=(D, H, W)))


def test_missing_hint_is_identity():
    rng = np.random.default_rng(0)
    cv = random_volume(rng)
    planes = make_planes(8, 0.5, 4.0)
    out = fuse_volume(cv, HintImages.missing(7, 6), planes)
    np.testing.assert_array_equal(out.scores, cv.scores)


def test_zero_confidence_is_bit_exact_identity():
    rng = np.random.default_rng(1)
    cv = random_volume(rng)
    planes = make_planes(8, 0.5, 4.0)
    h = hint_images(rng.uniform(0.5, 4, size=(6, 7)), np.zeros((6, 7)))
    assert fuse_volume(cv, h, planes).scores.tobytes() == cv.scores.tobytes()


def test_confidence_locality():
    rng = np.random.default_rng(2)
    cv = random_volume(rng)
    planes = make_planes(8, 0.5, 4.0)
    conf = np.zeros((6, 7))
    conf[:, 4:] = 1.0
    out = fuse_volume(cv, hint_images(np.full((6, 7), 1.5), conf), planes)
    np.testing.assert_array_equal(out.scores[:, :, :4], cv.scores[:, :, :4])
    assert np.any(out.scores[:, :, 4:] != cv.scores[:, :, 4:])


def test_dimension_mismatch():
    cv = random_volume(np.random.default_rng(0))
    with pytest.raises(ValueError):
        fuse_volume(cv, HintImages.missing(5, 5), make_planes(8, 0.5, 4.0))


@pytest.mark.parametrize("combiner", [AnalyticCombiner(), HintMlp.initialize(seed=4, passthrough=False)])
def test_per_cell_independence(combiner):
    rng = np.random.default_rng(3)
    cv = random_volume(rng, H=10, W=12)
    planes = make_planes(8, 0.5, 4.0)
    h = hint_images(rng.uniform(0.5, 4, size=(10, 12)), rng.uniform(size=(10, 12)))
    full = fuse_volume(cv, h, planes, combiner).scores
    sub = CostVolume(cv.scores[:, 2:7, 3:9], cv.valid_count[:, 2:7, 3:9])
    hs = hint_images(h.depth.values[2:7, 3:9], h.confidence.values[2:7, 3:9])
    np.testing.assert_allclose(fuse_volume(sub, hs, planes, combiner).scores, full[:, 2:7, 3:9], rtol=1e-12, atol=1e-15)


def test_perfect_hint_moves_argmax_to_gt_plane():
    # textureless wall: matching cannot resolve depth, the hint decides
    planes = make_planes()
    d_star = 1.7
    spec = SceneSpec(extents=(4.0, 3.5, 2.5), texture_seed=1, textureless=(((3.9, -1, -1), (4.1, 5, 4)),),
                     camera={"width": 128, "height": 96, "fx": 100.0, "fy": 100.0, "cx": 63.5, "cy": 47.5})
    eye = np.array([4.0 - d_star, 1.75, 1.25])
    ref = render_synthetic_frame(spec, Pose.look_at(eye, eye + [1, 0, 0]), frame_id=0)
    src = render_synthetic_frame(spec, Pose.look_at(eye + [0, 0.3, 0], eye + [1, 0.3, 0]), frame_id=1)
    cv = build_cost_volume(ref, [src], planes)
    gt = downsample_depth(ref.gt_depth, 4).values
    fused = fuse_volume(cv, hint_images(gt, np.ones(gt.shape)), planes)
    k = np.argmax(np.where(cv.valid_count > 0, fused.scores, -np.inf), axis=0)
    nearest = np.argmin(np.abs(planes.values[:, None, None] - gt[None]), axis=0)
    seen = np.take_along_axis(cv.valid_count, nearest[None], 0)[0] > 0
    assert seen.mean() > 0.8
    assert np.mean((k == nearest)[seen]) >= 0.99
    assert np.mean((np.argmax(cv.scores, axis=0) == nearest)[seen]) < 0.5


# --------------------------------------------------------------------------- gradients


def test_dead_relu_gradients():
    mlp = HintMlp.zeros()
    x = np.random.default_rng(0).uniform(size=(5, 3))
    mlp.biases[-1][:] = 0.2
    loss, grads = mlp_gradients(mlp, x, np.zeros(5))
    assert loss == pytest.approx(0.04)
    for g in grads[:-1]:
        np.testing.assert_array_equal(g, 0.0)
    assert grads[-1][0] == pytest.approx(2 * 0.2)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    mlp = HintMlp.initialize(seed=5, sizes=(3, 32, 32, 1), passthrough=False)
    for b in mlp.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(6, 3))
    t = rng.normal(size=6)
    for loss in ("mse", "l1"):
        _, grads = mlp_gradients(mlp, x, t, loss)
        num = numeric_grad(lambda: mlp_gradients(mlp, x, t, loss)[0], mlp.parameters())
        assert max_rel_error(grads, num) < 1e-4


def test_duplicated_batch_same_gradient():
    mlp = HintMlp.initialize(seed=6, passthrough=False)
    x = np.array([[0.3, 0.2, 0.5]])
    _, g1 = mlp_gradients(mlp, x, [0.1])
    _, gk = mlp_gradients(mlp, np.repeat(x, 5, axis=0), [0.1] * 5)
    for a, b in zip(g1, gk):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError):
        mlp_gradients(mlp, np.empty((0, 3)), [])


def test_softargmax_loss_gradient():
    rng = np.random.default_rng(7)
    planes = make_planes(12, 0.5, 4.0)
    mlp = HintMlp.initialize(seed=8, sizes=(3, 8, 8, 1), passthrough=False)
    cols = np.concatenate([rng.uniform(-1, 1, (5, 12, 1)), rng.uniform(0, 2, (5, 12, 1)), rng.uniform(0, 1, (5, 12, 1))], -1)
    valid = rng.uniform(size=(5, 12)) > 0.2
    valid[:, 0] = True
    gt = rng.uniform(0.6, 3.5, size=5)
    _, grads = softargmax_log_loss(mlp, cols, valid, gt, planes, 10.0)
    num = numeric_grad(lambda: softargmax_log_loss(mlp, cols, valid, gt, planes, 10.0, grad=False)[0], mlp.parameters())
    assert max_rel_error(grads, num) < 1e-4


# --------------------------------------------------------------------------- sampling and training


def test_sample_hint_mode_frequencies():
    rng = np.random.default_rng(42)
    draws = [sample_hint_mode(rng) for _ in range(100_000)]
    for mode, p in ((HintMode.NO_HINT, 0.5), (HintMode.FULL_TSDF, 0.25), (HintMode.PARTIAL_TSDF, 0.25)):
        assert abs(draws.count(mode) / len(draws) - p) <= 0.01
    a = [sample_hint_mode(np.random.default_rng(9)) for _ in range(3)]
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [sample_hint_mode(r1) for _ in range(50)] == [sample_hint_mode(r2) for _ in range(50)]
    assert len(set(a)) == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sampler_determinism(seed):
    r1, r2 = np.random.default_rng(seed), np.random.default_rng(seed)
    assert [sample_hint_mode(r1) for _ in range(20)] == [sample_hint_mode(r2) for _ in range(20)]


@pytest.fixture(scope="module")
def correct_hint_items():
    """Training items whose hints are the downsampled GT depth at full confidence."""
    planes = make_planes()
    items = []
    for seed in range(3):
        frames = render_sequence(small_room(width=96, height=72, fx=75.0, n=5, seed=seed,
                                            textureless=[((3.9, 0.5, 0.3), (4.1, 3.0, 2.2))]))
        for i in (2, 4):
            cv = build_cost_volume(frames[i], [frames[i - 2], frames[i - 1]], planes)
            gt = downsample_depth(frames[i].gt_depth, 4).values[: cv.shape[1], : cv.shape[2]]
            h = hint_images(gt, (gt > 0).astype(float))
            items.append(TrainingItem(cv, gt, {HintMode.FULL_TSDF: h, HintMode.PARTIAL_TSDF: h}))
    return planes, items


def fused_abs_rel(combiner, items, planes, use_hint=True):
    errs = []
    for it in items:
        h = it.hints[HintMode.FULL_TSDF] if use_hint else HintImages.missing(it.gt_depth.shape[1], it.gt_depth.shape[0])
        d = argmax_depth(fuse_volume(it.cost_volume, h, planes, combiner), planes).values
        ok = (it.gt_depth > 0) & (d > 0)
        errs.append(np.abs(d[ok] - it.gt_depth[ok]) / it.gt_depth[ok])
    return float(np.concatenate(errs).mean())


def test_training_with_correct_hints_beats_matching(correct_hint_items):
    planes, items = correct_hint_items
    res = train_hint_mlp(items[:4], planes, TrainConfig(steps=150, learning_rate=3e-3, seed=0, validation_fraction=0.0))
    held = items[4:]
    assert fused_abs_rel(res.mlp, held, planes) < fused_abs_rel(None, held, planes, use_hint=False)


def test_training_without_hints_matches_matching_only(correct_hint_items):
    planes, items = correct_hint_items
    cfg = TrainConfig(steps=60, learning_rate=1e-3, seed=1, forced_mode=HintMode.NO_HINT, validation_fraction=0.0)
    res = train_hint_mlp(items[:4], planes, cfg)
    held = items[4:]
    base = fused_abs_rel(None, held, planes, use_hint=False)
    assert fused_abs_rel(res.mlp, held, planes, use_hint=False) <= base * 1.02


def test_zero_learning_rate_keeps_parameters(correct_hint_items):
    planes, items = correct_hint_items
    init = HintMlp.initialize(seed=2)
    res = train_hint_mlp(items, planes, TrainConfig(steps=3, learning_rate=0.0), init=init)
    for a, b in zip(init.parameters(), res.mlp.parameters()):
        np.testing.assert_array_equal(a, b)
    assert len(res.train_loss) == 3 and len(res.validation_loss) == 3

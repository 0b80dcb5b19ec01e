import json

import numpy as np
import pytest

from hintmvs.evaluation import (
    DepthMetrics,
    VisibilityVolume,
    build_frustum_volume,
    build_visibility_volume,
    depth_metrics,
    evaluate_meshes,
    format_table,
    mesh_metrics,
    metrics_json,
    sample_mesh,
    trim_prediction,
    upsample_nearest,
)
from hintmvs.geometry import DepthMap, TriangleMesh
from hintmvs.synth import Box, render_sequence, scene_mesh
from hintmvs.tsdf import TsdfVolume

from conftest import small_room
from test_render import brute_force


def test_depth_metrics_examples():
    gt = DepthMap(np.array([[2.0, 4.0]]))
    m = depth_metrics(gt, gt)
    assert (m.abs_diff, m.abs_rel, m.sq_rel, m.rmse, m.delta_105, m.delta_125) == (0, 0, 0, 0, 100, 100)
    m = depth_metrics(DepthMap(np.array([[2.2, 3.8]])), gt)
    for got, want in zip((m.abs_diff, m.abs_rel, m.sq_rel, m.rmse, m.delta_105, m.delta_125), (0.2, 0.075, 0.015, 0.2, 0.0, 100.0)):
        assert got == pytest.approx(want, abs=1e-9)
    assert m.pixel_count == 2
    assert depth_metrics(DepthMap.invalid(2, 1), gt) is None
    with pytest.raises(ValueError):
        depth_metrics(DepthMap(np.ones((2, 2))), gt)


def test_delta_boundary():
    gt = DepthMap(np.linspace(0.5, 8.0, 40).reshape(5, 8))
    lo = depth_metrics(DepthMap(gt.values * 1.049), gt)
    hi = depth_metrics(DepthMap(gt.values * 1.051), gt)
    assert (lo.delta_105, lo.delta_125) == (100.0, 100.0)
    assert hi.delta_105 == 0.0 and hi.delta_125 == 100.0


def test_max_eval_depth_and_mask():
    gt = DepthMap(np.array([[1.0, 12.0, 2.0]]))
    pred = DepthMap(np.array([[1.1, 1.0, 2.0]]))
    assert depth_metrics(pred, gt).pixel_count == 2
    assert depth_metrics(pred, gt, mask=[[False, True, True]]).abs_rel == 0.0


def test_upsample_nearest():
    d = DepthMap(np.array([[1.0, 2.0], [3.0, -1.0]]))
    up = upsample_nearest(d, 4, 4)
    np.testing.assert_array_equal(up.values[:2, :2], 1.0)
    np.testing.assert_array_equal(up.values[2:, 2:], -1.0)


def test_sample_mesh_examples():
    tri = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    p = sample_mesh(tri, 5000, seed=3)
    assert np.all(p[:, 0] >= -1e-12) and np.all(p[:, 1] >= -1e-12) and np.all(p.sum(axis=1) <= 1 + 1e-12)
    np.testing.assert_array_equal(p, sample_mesh(tri, 5000, seed=3))
    assert sample_mesh(TriangleMesh.empty(), 10).shape == (0, 3)
    # triangles of area 1.5 and 0.5, far apart
    two = TriangleMesh([[0, 0, 0], [3, 0, 0], [0, 1, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]], [[0, 1, 2], [3, 4, 5]])
    q = sample_mesh(two, 40000, seed=0)
    ratio = np.sum(q[:, 0] < 5) / np.sum(q[:, 0] >= 5)
    assert ratio == pytest.approx(3.0, rel=0.02)


def test_mesh_metrics_examples():
    a = np.random.default_rng(0).uniform(size=(50, 3))
    m = mesh_metrics(a, a)
    assert (m.acc, m.comp, m.chamfer, m.prec, m.recall, m.f_score) == (0, 0, 0, 1, 1, 1)
    m = mesh_metrics([[0.03, 0, 0]], [[0, 0, 0]])
    assert m.acc == pytest.approx(3.0, abs=1e-9) and m.comp == pytest.approx(3.0, abs=1e-9)
    assert (m.prec, m.recall, m.f_score) == (1.0, 1.0, 1.0)
    m = mesh_metrics([[0.06, 0, 0]], [[0, 0, 0]])
    assert (m.prec, m.recall, m.f_score) == (0.0, 0.0, 0.0)
    assert m.chamfer == pytest.approx((m.acc + m.comp) / 2)
    assert mesh_metrics(np.zeros((0, 3)), a) is None


def test_mesh_metrics_match_brute_force():
    rng = np.random.default_rng(1)
    p, g = rng.uniform(size=(300, 3)), rng.uniform(size=(200, 3))
    d = np.linalg.norm(p[:, None] - g[None], axis=-1)
    m = mesh_metrics(p, g, threshold=0.08)
    assert m.acc == pytest.approx(100 * d.min(1).mean(), abs=1e-9)
    assert m.comp == pytest.approx(100 * d.min(0).mean(), abs=1e-9)
    assert m.prec == pytest.approx(np.mean(d.min(1) < 0.08))
    assert m.recall == pytest.approx(np.mean(d.min(0) < 0.08))


# --------------------------------------------------------------------------- visibility protocol


def phantom_prediction(spec):
    """GT scene plus a slab hidden inside the box: seen by no camera, yet inside every frustum."""
    b = spec.boxes[0]
    slab = Box("phantom", b.center, (0.05, 0.4, 0.4), b.yaw_deg)
    from hintmvs.synth import _box_mesh

    return TriangleMesh.concatenate([scene_mesh(spec), _box_mesh(slab)])


def oracle_visibility(gt_mesh, frames, margin, voxel_size):
    """Per-voxel visibility from brute-force ray casting through each voxel's pixel."""
    from hintmvs.evaluation import _grid_over

    origin, shape = _grid_over(gt_mesh.vertices, voxel_size, margin)
    grid = np.indices(shape).reshape(3, -1).T
    centers = origin + grid * voxel_size
    mask = np.zeros(len(centers), dtype=bool)
    for f in frames:
        best, _, _, _ = brute_force(gt_mesh, f.pose, f.intrinsics)
        K = f.intrinsics
        for i, c in enumerate(centers):
            if mask[i]:
                continue
            x, y, z = f.pose.inverse().transform(c)
            if z <= 0:
                continue
            u, v = int(np.rint(K.fx * x / z + K.cx)), int(np.rint(K.fy * y / z + K.cy))
            if 0 <= u < K.width and 0 <= v < K.height and np.isfinite(best[v, u]) and z <= best[v, u] + margin:
                mask[i] = True
    return VisibilityVolume(origin, voxel_size, mask.reshape(shape))


@pytest.fixture(scope="module")
def mask_case():
    spec = small_room(width=32, height=24, fx=25.0, n=3)
    frames = render_sequence(spec)
    gt = scene_mesh(spec)
    return spec, frames, gt, phantom_prediction(spec)


def test_visibility_examples(mask_case):
    from hintmvs.evaluation import _seen
    from hintmvs.render import render_depth_of_gt

    _, frames, gt, _ = mask_case
    f = frames[0]
    K = f.intrinsics
    rendered = render_depth_of_gt(gt, f.pose, K).values
    d = rendered[12, 16]
    on_surface = f.pose.transform([(16 - K.cx) / K.fx * d, (12 - K.cy) / K.fy * d, d])
    behind = f.pose.transform([(16 - K.cx) / K.fx * (d + 1), (12 - K.cy) / K.fy * (d + 1), d + 1])
    np.testing.assert_array_equal(_seen(np.array([on_surface, behind]), rendered, f.pose, K, 0.0), [True, False])
    vis = build_visibility_volume(gt, frames, margin=0.05, voxel_size=0.1)
    assert vis.visible_count > 0


def test_visibility_matches_ray_cast_oracle(mask_case):
    _, frames, gt, _ = mask_case
    ours = build_visibility_volume(gt, frames, margin=0.05, voxel_size=0.1)
    oracle = oracle_visibility(gt, frames, 0.05, 0.1)
    assert np.mean(ours.mask != oracle.mask) < 0.001
    legacy = build_frustum_volume(gt, frames, voxel_size=0.1)
    assert np.all(legacy.mask[ours.mask])
    assert legacy.visible_count > ours.visible_count


def test_rendered_mask_tightens_acc(mask_case):
    _, frames, gt, pred = mask_case
    vis = build_visibility_volume(gt, frames, margin=0.05, voxel_size=0.1)
    legacy = build_frustum_volume(gt, frames, voxel_size=0.1)
    a_vis = evaluate_meshes(pred, gt, vis, n_points=20000).acc
    a_leg = evaluate_meshes(pred, gt, legacy, n_points=20000).acc
    assert a_vis < a_leg
    oracle = oracle_visibility(gt, frames, 0.05, 0.1)
    assert evaluate_meshes(pred, gt, oracle, n_points=20000).acc == pytest.approx(a_vis, abs=1e-6)


def test_trim_examples():
    vis = VisibilityVolume(np.zeros(3), 1.0, np.zeros((3, 1, 1), dtype=bool))
    vis.mask[0] = True
    inside = TriangleMesh([[0, 0, 0], [0.2, 0, 0], [0, 0.2, 0]], [[0, 1, 2]])
    outside = TriangleMesh([[2, 0, 0], [2.2, 0, 0], [2, 0.2, 0]], [[0, 1, 2]])
    both = TriangleMesh.concatenate([inside, outside])
    assert trim_prediction(inside, vis).n_triangles == 1
    assert trim_prediction(outside, vis).n_triangles == 0
    assert trim_prediction(both, vis).n_triangles == 1


def test_mask_volume_roundtrip(tmp_path):
    vis = VisibilityVolume(np.array([0.2, -0.4, 0.0]), 0.2, np.random.default_rng(0).uniform(size=(9, 5, 4)) > 0.5)
    vol = vis.to_volume()
    vol.save(tmp_path / "mask.dttv")
    back = VisibilityVolume.from_volume(TsdfVolume.load(tmp_path / "mask.dttv"))
    pts = vis.centers()
    np.testing.assert_array_equal(back.contains(pts), vis.contains(pts))


def test_reporting():
    m = depth_metrics(DepthMap(np.array([[2.2, 3.8]])), DepthMap(np.array([[2.0, 4.0]])))
    table = format_table({"run": m, "empty": None}, DepthMetrics.COLUMNS)
    assert "abs_rel" in table.splitlines()[0] and "0.0750" in table
    assert json.loads(metrics_json({"run": m}))["run"]["abs_rel"] == pytest.approx(0.075)

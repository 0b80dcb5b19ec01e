from collections import Counter

import numpy as np
import pytest

from hintmvs.geometry import TriangleMesh
from hintmvs.mesh import extract_mesh, march_dense, read_ply, weld_vertices, write_ply
from hintmvs.tsdf import BLOCK, TsdfConfig, TsdfVolume


def sphere_volume(radius=0.5, center=(0.0, 0.0, 0.0), cfg=TsdfConfig()):
    """Write an analytic sphere SDF (positive outside) into every block the shell touches."""
    vol = TsdfVolume(cfg)
    bs = cfg.voxel_size * BLOCK
    lo = np.floor((np.asarray(center) - radius - cfg.truncation) / bs).astype(int) - 1
    hi = np.ceil((np.asarray(center) + radius + cfg.truncation) / bs).astype(int) + 1
    coords = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), -1).reshape(-1, 3)
    slots = vol.allocate(coords)
    X = vol.voxel_centers(slots)
    d = np.linalg.norm(X - np.asarray(center), axis=-1) - radius
    vol._tsdf[slots] = np.clip(d / cfg.truncation, -1, 1)
    vol._weight[slots] = 1.0
    vol._conf[slots] = 0.5
    return vol


def test_all_positive_is_empty():
    vol = TsdfVolume()
    s = vol.allocate([[0, 0, 0]])
    vol._weight[s] = 1.0
    assert extract_mesh(vol).n_triangles == 0
    assert extract_mesh(TsdfVolume()).n_triangles == 0


def test_single_corner_edge_midpoints():
    t = np.full((2, 2, 2), 0.5)
    t[0, 0, 0] = -0.5
    c = np.ones((2, 2, 2))
    c[0, 0, 0] = 0.5
    v, vc = march_dense(t, np.ones_like(t), c)
    assert len(v) == 3
    got = sorted(map(tuple, np.round(v, 12)))
    assert got == [(0.0, 0.0, 0.5), (0.0, 0.5, 0.0), (0.5, 0.0, 0.0)]
    np.testing.assert_allclose(vc, 0.75)


def test_unobserved_corner_skips_cell():
    t = np.full((2, 2, 2), 0.5)
    t[0, 0, 0] = -0.5
    w = np.ones_like(t)
    w[1, 1, 1] = 0.0
    v, _ = march_dense(t, w, np.ones_like(t))
    assert len(v) == 0


def test_sphere_vertex_radii():
    vol = sphere_volume()
    m = extract_mesh(vol)
    r = np.linalg.norm(m.vertices, axis=1)
    assert m.n_triangles > 1000
    assert np.max(np.abs(r - 0.5)) <= vol.config.voxel_size / 2
    assert np.mean(np.abs(r - 0.5)) < vol.config.voxel_size / 2
    np.testing.assert_allclose(m.vertex_confidence, 0.5)


def test_sphere_watertight():
    # generic position: no voxel center exactly on the surface
    m = weld_vertices(extract_mesh(sphere_volume(0.3, center=(0.0013, 0.0007, 0.0011))))
    assert m.triangle_areas().min() > 0
    edges = Counter()
    for a, b, c in m.triangles:
        for e in ((a, b), (b, c), (c, a)):
            edges[tuple(sorted(e))] += 1
    assert set(edges.values()) == {2}


def test_vertices_on_sign_change_edges():
    vol = sphere_volume(0.3)
    m = extract_mesh(vol)
    g = m.vertices / vol.config.voxel_size
    frac = np.abs(g - np.round(g))
    # exactly one coordinate is off-grid for an edge vertex
    assert np.all((frac > 1e-9).sum(axis=1) <= 1)


def test_matches_reference_marching_cubes_vertex_set():
    skm = pytest.importorskip("skimage.measure")
    rng = np.random.default_rng(3)
    t = rng.uniform(-1, 1, size=(9, 8, 7))
    v, _ = march_dense(t, np.ones_like(t), np.ones_like(t))
    ref, _, _, _ = skm.marching_cubes(t, level=0.0, allow_degenerate=True)
    from scipy.spatial import cKDTree

    # every edge crossing agrees; the reference additionally places cell-interior
    # vertices for ambiguous configurations, which the classic table does not
    d_ours, _ = cKDTree(ref).query(v)
    assert d_ours.max() < 1e-5
    d_ref, _ = cKDTree(v).query(ref)
    extra = ref[d_ref > 1e-5]
    off_grid = np.abs(extra - np.round(extra)) > 1e-5
    assert np.all(off_grid.sum(axis=1) == 3)


def test_ply_roundtrip(tmp_path):
    m = extract_mesh(sphere_volume(0.2))
    write_ply(tmp_path / "m.ply", m)
    back = read_ply(tmp_path / "m.ply")
    np.testing.assert_allclose(back.vertices, m.vertices.astype(np.float32))
    np.testing.assert_array_equal(back.triangles, m.triangles)
    np.testing.assert_allclose(back.vertex_confidence, m.vertex_confidence.astype(np.float32))
    write_ply(tmp_path / "e.ply", TriangleMesh.empty())
    assert read_ply(tmp_path / "e.ply").n_triangles == 0

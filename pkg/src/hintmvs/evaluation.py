"""Depth and mesh metrics, and visibility-volume trimming of predicted meshes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DepthMap, Frame, TriangleMesh
from .render import render_depth_of_gt
from .tsdf import BLOCK, TsdfConfig, TsdfVolume


@dataclass(frozen=True)
class DepthMetrics:
    abs_diff: float
    abs_rel: float
    sq_rel: float
    rmse: float
    delta_105: float
    delta_125: float
    pixel_count: int

    COLUMNS = ("abs_diff", "abs_rel", "sq_rel", "rmse", "delta_105", "delta_125")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MeshMetrics:
    acc: float
    comp: float
    chamfer: float
    prec: float
    recall: float
    f_score: float

    COLUMNS = ("acc", "comp", "chamfer", "prec", "recall", "f_score")

    def as_dict(self) -> dict:
        return asdict(self)


def upsample_nearest(pred: DepthMap, height: int, width: int) -> DepthMap:
    """Nearest-neighbour resize of a depth map by pixel-area correspondence."""
    if (pred.height, pred.width) == (height, width):
        return pred
    rows = np.minimum((np.arange(height) * pred.height) // height, pred.height - 1)
    cols = np.minimum((np.arange(width) * pred.width) // width, pred.width - 1)
    return DepthMap(pred.values[np.ix_(rows, cols)])


def depth_metrics(pred: DepthMap, gt: DepthMap, max_eval_depth: float = 10.0, mask=None) -> Optional[DepthMetrics]:
    """Standard depth error metrics over pixels valid in both maps; ``None`` if none overlap."""
    if pred.values.shape != gt.values.shape:
        raise ValueError(f"prediction {pred.values.shape} and ground truth {gt.values.shape} differ in shape")
    ok = pred.validity & gt.validity & (gt.values <= max_eval_depth)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    n = int(ok.sum())
    if n == 0:
        return None
    p = pred.values[ok]
    g = gt.values[ok]
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_diff=float(np.mean(np.abs(diff))),
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        delta_105=float(100.0 * np.mean(ratio < 1.05)),
        delta_125=float(100.0 * np.mean(ratio < 1.25)),
        pixel_count=n,
    )


def mean_depth_metrics(per_frame: Iterable[Optional[DepthMetrics]]) -> Optional[DepthMetrics]:
    """Average of per-frame metrics (frames without overlap are skipped)."""
    ms = [m for m in per_frame if m is not None]
    if not ms:
        return None
    vals = {c: float(np.mean([getattr(m, c) for m in ms])) for c in DepthMetrics.COLUMNS}
    return DepthMetrics(**vals, pixel_count=int(sum(m.pixel_count for m in ms)))


def sample_mesh(mesh: TriangleMesh, n_points: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform surface samples (n_points, 3); empty mesh gives an empty cloud."""
    if mesh.n_triangles == 0:
        return np.zeros((0, 3))
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n_points, p=areas / total)
    r1 = np.sqrt(rng.random(n_points))
    r2 = rng.random(n_points)
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def mesh_metrics(pred_cloud: np.ndarray, gt_cloud: np.ndarray, threshold: float = 0.05) -> Optional[MeshMetrics]:
    """Accuracy/completion (cm), precision/recall/F at ``threshold`` meters; ``None`` for empty input."""
    pred_cloud = np.asarray(pred_cloud, dtype=np.float64).reshape(-1, 3)
    gt_cloud = np.asarray(gt_cloud, dtype=np.float64).reshape(-1, 3)
    if len(pred_cloud) == 0 or len(gt_cloud) == 0:
        return None
    d_pred, _ = cKDTree(gt_cloud).query(pred_cloud, k=1)
    d_gt, _ = cKDTree(pred_cloud).query(gt_cloud, k=1)
    acc = float(np.mean(d_pred)) * 100.0
    comp = float(np.mean(d_gt)) * 100.0
    prec = float(np.mean(d_pred < threshold))
    recall = float(np.mean(d_gt < threshold))
    f = 2 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0
    return MeshMetrics(acc, comp, (acc + comp) / 2.0, prec, recall, f)


# --------------------------------------------------------------------------- visibility


@dataclass
class VisibilityVolume:
    """Boolean voxel grid; voxel ``[i, j, k]`` is centered at ``origin + (i, j, k) * voxel_size``."""

    origin: np.ndarray
    voxel_size: float
    mask: np.ndarray

    def contains(self, points: np.ndarray) -> np.ndarray:
        idx = np.rint((np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.mask.shape)), axis=1)
        out = np.zeros(len(idx), dtype=bool)
        i = idx[inside]
        out[inside] = self.mask[i[:, 0], i[:, 1], i[:, 2]]
        return out

    def centers(self) -> np.ndarray:
        grid = np.indices(self.mask.shape).reshape(3, -1).T
        return self.origin + grid * self.voxel_size

    @property
    def visible_count(self) -> int:
        return int(self.mask.sum())

    def to_volume(self) -> TsdfVolume:
        """Pack into a DTTV mask volume: visible voxels carry weight 1.

        The grid origin is snapped to the voxel lattice, so it must be a multiple
        of ``voxel_size``.
        """
        base = np.rint(self.origin / self.voxel_size).astype(np.int64)
        if not np.allclose(base * self.voxel_size, self.origin, atol=1e-9):
            raise ValueError("visibility grid origin is not on the voxel lattice")
        vol = TsdfVolume(TsdfConfig(voxel_size=self.voxel_size, truncation=self.voxel_size), is_mask=True)
        idx = np.argwhere(self.mask) + base
        if len(idx) == 0:
            return vol
        blocks = np.floor_divide(idx, BLOCK)
        slots = vol.allocate(np.unique(blocks, axis=0))
        slot_of = {tuple(c): s for c, s in zip(np.unique(blocks, axis=0).tolist(), slots)}
        loc = idx - blocks * BLOCK
        s = np.array([slot_of[tuple(c)] for c in blocks.tolist()])
        vol._weight[s, loc[:, 0], loc[:, 1], loc[:, 2]] = 1.0
        vol._tsdf[s, loc[:, 0], loc[:, 1], loc[:, 2]] = 0.0
        vol._conf[s, loc[:, 0], loc[:, 1], loc[:, 2]] = 1.0
        return vol

    @classmethod
    def from_volume(cls, vol: TsdfVolume) -> "VisibilityVolume":
        if not vol.is_mask:
            raise ValueError("volume is not a visibility mask")
        vs = vol.config.voxel_size
        if vol.n_blocks == 0:
            return cls(np.zeros(3), vs, np.zeros((0, 0, 0), dtype=bool))
        origin, _, weight, _ = vol.dense(pad=0)
        return cls(origin * vs, vs, weight > 0)


def _grid_over(points: np.ndarray, voxel_size: float, pad: float):
    lo = np.floor((points.min(axis=0) - pad) / voxel_size) * voxel_size
    hi = points.max(axis=0) + pad
    shape = tuple(int(x) for x in np.floor((hi - lo) / voxel_size) + 1)
    return lo, shape


def build_visibility_volume(
    gt_mesh: TriangleMesh,
    frames: Sequence[Frame],
    margin: float = 0.05,
    voxel_size: float = 0.02,
    render_scale: int = 1,
) -> VisibilityVolume:
    """Voxels seen in front of (or within ``margin`` behind) the rendered GT surface in any frame."""
    origin, shape = _grid_over(gt_mesh.vertices, voxel_size, margin)
    vis = VisibilityVolume(origin, voxel_size, np.zeros(shape, dtype=bool))
    centers = vis.centers()
    flat = vis.mask.reshape(-1)
    for f in frames:
        K = f.intrinsics if render_scale == 1 else f.intrinsics.downsampled(render_scale)
        rendered = render_depth_of_gt(gt_mesh, f.pose, K).values
        flat |= _seen(centers, rendered, f.pose, K, margin)
    return vis


def _seen(centers, rendered, pose, K, margin):
    pc = pose.inverse().transform(centers)
    z = pc[:, 2]
    out = np.zeros(len(centers), dtype=bool)
    front = z > 0
    u = np.rint(K.fx * pc[front, 0] / z[front] + K.cx).astype(np.int64)
    v = np.rint(K.fy * pc[front, 1] / z[front] + K.cy).astype(np.int64)
    ib = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    idx = np.nonzero(front)[0][ib]
    d = rendered[v[ib], u[ib]]
    out[idx] = (d > 0) & (z[idx] <= d + margin)
    return out


def build_frustum_volume(
    gt_mesh: TriangleMesh, frames: Sequence[Frame], voxel_size: float = 0.02, max_depth: float = np.inf, pad: float = 0.05
) -> VisibilityVolume:
    """Legacy mask: union of camera frusta over the GT bounding box, ignoring occlusion."""
    origin, shape = _grid_over(gt_mesh.vertices, voxel_size, pad)
    vis = VisibilityVolume(origin, voxel_size, np.zeros(shape, dtype=bool))
    centers = vis.centers()
    flat = vis.mask.reshape(-1)
    for f in frames:
        K = f.intrinsics
        pc = f.pose.inverse().transform(centers)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(K.fx * pc[:, 0] / z + K.cx)
            v = np.rint(K.fy * pc[:, 1] / z + K.cy)
        flat |= (z > 0) & (z <= max_depth) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return vis


def trim_prediction(pred_mesh: TriangleMesh, vis: VisibilityVolume) -> TriangleMesh:
    """Keep triangles whose centroid falls in a visible voxel."""
    if pred_mesh.n_triangles == 0:
        return pred_mesh
    centroids = pred_mesh.vertices[pred_mesh.triangles].mean(axis=1)
    keep = vis.contains(centroids)
    return TriangleMesh(pred_mesh.vertices, pred_mesh.triangles[keep], pred_mesh.vertex_confidence)


def evaluate_meshes(
    pred: TriangleMesh,
    gt: TriangleMesh,
    vis: Optional[VisibilityVolume] = None,
    n_points: int = 200_000,
    threshold: float = 0.05,
    seed: int = 0,
) -> Optional[MeshMetrics]:
    """Trim (if a mask is given), sample both meshes, and score them."""
    if vis is not None:
        pred = trim_prediction(pred, vis)
    return mesh_metrics(sample_mesh(pred, n_points, seed), sample_mesh(gt, n_points, seed + 1), threshold)


# --------------------------------------------------------------------------- reporting


def format_table(rows: dict, columns: Sequence[str]) -> str:
    """Aligned plain-text table; ``rows`` maps a row label to a metrics object or None."""
    label_w = max([len(str(k)) for k in rows] + [4])
    col_w = max(10, max(len(c) for c in columns) + 1)
    lines = ["".ljust(label_w) + "".join(c.rjust(col_w) for c in columns)]
    for label, m in rows.items():
        if m is None:
            lines.append(str(label).ljust(label_w) + "(no valid pixels)".rjust(col_w))
            continue
        cells = []
        for c in columns:
            v = getattr(m, c)
            cells.append((f"{v:.4f}" if abs(v) < 10 else f"{v:.2f}").rjust(col_w))
        lines.append(str(label).ljust(label_w) + "".join(cells))
    return "\n".join(lines)


def metrics_json(rows: dict) -> str:
    return json.dumps({k: (None if m is None else m.as_dict()) for k, m in rows.items()}, indent=2)

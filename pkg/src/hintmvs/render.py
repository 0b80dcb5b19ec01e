"""Software z-buffer rasterizer producing depth and confidence hints from a mesh."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .geometry import INVALID_DEPTH, ConfidenceMap, DepthMap, Intrinsics, Pose, TriangleMesh

NEAR_CLIP = 0.01


@dataclass(frozen=True)
class HintImages:
    depth: DepthMap
    confidence: ConfidenceMap

    def __post_init__(self):
        if self.depth.values.shape != self.confidence.values.shape:
            raise ValueError("hint depth and confidence must have the same shape")

    @classmethod
    def missing(cls, width: int, height: int) -> "HintImages":
        return cls(DepthMap.invalid(width, height), ConfidenceMap(np.zeros((height, width))))

    @property
    def valid(self) -> np.ndarray:
        return self.depth.validity


@numba.njit(cache=True)
def _raster_triangle(p, c, tri_id, fx, fy, cx, cy, W, H, zbuf, cbuf, ibuf):
    # p: (3, 3) camera-space vertices, all with z >= near
    u0 = fx * p[0, 0] / p[0, 2] + cx
    v0 = fy * p[0, 1] / p[0, 2] + cy
    u1 = fx * p[1, 0] / p[1, 2] + cx
    v1 = fy * p[1, 1] / p[1, 2] + cy
    u2 = fx * p[2, 0] / p[2, 2] + cx
    v2 = fy * p[2, 1] / p[2, 2] + cy
    area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
    if area == 0.0:
        return
    xmin = max(int(np.ceil(min(u0, min(u1, u2)))), 0)
    xmax = min(int(np.floor(max(u0, max(u1, u2)))), W - 1)
    ymin = max(int(np.ceil(min(v0, min(v1, v2)))), 0)
    ymax = min(int(np.floor(max(v0, max(v1, v2)))), H - 1)
    if xmin > xmax or ymin > ymax:
        return
    iz0 = 1.0 / p[0, 2]
    iz1 = 1.0 / p[1, 2]
    iz2 = 1.0 / p[2, 2]
    inv_area = 1.0 / area
    for y in range(ymin, ymax + 1):
        fy_ = float(y)
        for x in range(xmin, xmax + 1):
            fx_ = float(x)
            w0 = ((u1 - fx_) * (v2 - fy_) - (u2 - fx_) * (v1 - fy_)) * inv_area
            w1 = ((u2 - fx_) * (v0 - fy_) - (u0 - fx_) * (v2 - fy_)) * inv_area
            w2 = 1.0 - w0 - w1
            if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                continue
            iz = w0 * iz0 + w1 * iz1 + w2 * iz2
            if iz <= 0.0:
                continue
            z = 1.0 / iz
            if z < zbuf[y, x] or (z == zbuf[y, x] and tri_id < ibuf[y, x]):
                zbuf[y, x] = z
                cbuf[y, x] = (w0 * c[0] * iz0 + w1 * c[1] * iz1 + w2 * c[2] * iz2) * z
                ibuf[y, x] = tri_id


@numba.njit(cache=True)
def _rasterize(verts, tris, conf, fx, fy, cx, cy, W, H, near):
    zbuf = np.full((H, W), np.inf)
    cbuf = np.zeros((H, W))
    ibuf = np.full((H, W), -1, dtype=np.int64)
    p = np.empty((3, 3))
    c = np.empty(3)
    poly = np.empty((4, 3))
    pc = np.empty(4)
    q = np.empty((3, 3))
    qc = np.empty(3)
    for t in range(tris.shape[0]):
        n_front = 0
        for k in range(3):
            vi = tris[t, k]
            for d in range(3):
                p[k, d] = verts[vi, d]
            c[k] = conf[vi]
            if p[k, 2] >= near:
                n_front += 1
        if n_front == 0:
            continue
        if n_front == 3:
            _raster_triangle(p, c, t, fx, fy, cx, cy, W, H, zbuf, cbuf, ibuf)
            continue
        # Sutherland-Hodgman against z = near; yields a triangle or a quad
        n = 0
        for k in range(3):
            a = k
            b = (k + 1) % 3
            a_in = p[a, 2] >= near
            b_in = p[b, 2] >= near
            if a_in:
                for d in range(3):
                    poly[n, d] = p[a, d]
                pc[n] = c[a]
                n += 1
            if a_in != b_in:
                s = (near - p[a, 2]) / (p[b, 2] - p[a, 2])
                for d in range(3):
                    poly[n, d] = p[a, d] + s * (p[b, d] - p[a, d])
                poly[n, 2] = near
                pc[n] = c[a] + s * (c[b] - c[a])
                n += 1
        for k in range(1, n - 1):
            for d in range(3):
                q[0, d] = poly[0, d]
                q[1, d] = poly[k, d]
                q[2, d] = poly[k + 1, d]
            qc[0] = pc[0]
            qc[1] = pc[k]
            qc[2] = pc[k + 1]
            _raster_triangle(q, qc, t, fx, fy, cx, cy, W, H, zbuf, cbuf, ibuf)
    return zbuf, cbuf, ibuf


def rasterize(mesh: TriangleMesh, pose: Pose, K: Intrinsics):
    """Raw z-buffer pass: ``(depth, confidence, triangle_id)`` arrays; uncovered depth is ``inf``."""
    if mesh.n_triangles == 0:
        return (
            np.full((K.height, K.width), np.inf),
            np.zeros((K.height, K.width)),
            np.full((K.height, K.width), -1, dtype=np.int64),
        )
    cam = pose.inverse().transform(mesh.vertices)
    conf = mesh.vertex_confidence if mesh.vertex_confidence is not None else np.ones(len(cam))
    return _rasterize(
        np.ascontiguousarray(cam), mesh.triangles, np.ascontiguousarray(conf, dtype=np.float64),
        K.fx, K.fy, K.cx, K.cy, K.width, K.height, NEAR_CLIP,
    )


def render_hint(mesh: TriangleMesh, pose: Pose, K: Intrinsics) -> HintImages:
    """Depth and perspective-correct vertex-confidence images of ``mesh`` seen from ``pose``."""
    if mesh.n_triangles and mesh.vertex_confidence is None:
        raise ValueError("render_hint needs per-vertex confidence")
    z, c, ids = rasterize(mesh, pose, K)
    covered = ids >= 0
    depth = np.where(covered, z, INVALID_DEPTH)
    conf = np.where(covered, np.clip(c, 0.0, 1.0), 0.0)
    return HintImages(DepthMap(depth), ConfidenceMap(conf))


def render_depth_of_gt(mesh: TriangleMesh, pose: Pose, K: Intrinsics) -> DepthMap:
    z, _, ids = rasterize(mesh, pose, K)
    return DepthMap(np.where(ids >= 0, z, INVALID_DEPTH))


def warmup() -> None:
    """Trigger JIT compilation so later timings measure steady-state cost."""
    tri = TriangleMesh(np.array([[-1.0, -1, 2], [1, -1, 2], [0, 1, -1]]), np.array([[0, 1, 2]]), np.ones(3))
    render_hint(tri, Pose(), Intrinsics(4, 4, 2, 2, 4, 4))


# --------------------------------------------------------------------------- debug dumps


def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom-to-top)."""
    img = np.asarray(image, dtype="<f4")
    H, W = img.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() not in (b"Pf", b"PF"):
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if parts[0].strip() == b"PF" else 1
    W, H = map(int, parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    shape = (H, W, channels) if channels == 3 else (H, W)
    arr = np.frombuffer(parts[3], dtype=dtype, count=H * W * channels).reshape(shape)
    return arr[::-1].astype(np.float64)


def write_pgm(path, image: np.ndarray, max_value: float) -> None:
    """16-bit binary PGM scaled so ``max_value`` maps to 65535; negatives become 0."""
    img = np.clip(np.asarray(image, dtype=np.float64) / max_value, 0.0, 1.0)
    data = np.rint(img * 65535).astype(">u2")
    H, W = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n65535\n".encode("ascii"))
        f.write(data.tobytes())


def dump_hint(stem, hint: HintImages) -> None:
    """Debug dump: ``<stem>_depth.pfm`` plus ``<stem>_confidence.pgm``."""
    write_pfm(f"{stem}_depth.pfm", hint.depth.values)
    write_pgm(f"{stem}_confidence.pgm", hint.confidence.values, 1.0)

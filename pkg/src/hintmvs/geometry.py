"""Camera, image and mesh types plus the projection and warp math.

Conventions used throughout the package:

* Poses are camera-to-world. ``Pose.world_to_camera()`` gives the inverse.
* Camera frame is x right, y down, z forward.
* Pixel ``(i, j)`` (column, row) has its center at continuous image
  coordinate ``(i, j)``; a pixel covers ``[i - 0.5, i + 0.5)``.
* Invalid depth is stored as ``-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

INVALID_DEPTH = -1.0


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K, width: int, height: int) -> "Intrinsics":
        K = np.asarray(K, dtype=np.float64).reshape(3, 3)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), int(width), int(height))

    def downsampled(self, factor: int) -> "Intrinsics":
        """Intrinsics of the image after ``factor x factor`` area averaging."""
        return Intrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx + 0.5) / factor - 0.5,
            cy=(self.cy + 0.5) / factor - 0.5,
            width=self.width // factor,
            height=self.height // factor,
        )

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Normalized ray directions ``(x/z, y/z)`` for every pixel center, shape (H, W)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        return (uu - self.cx) / self.fx, (vv - self.cy) / self.fy


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64).reshape(4, 4)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` looking at ``target`` with world ``up`` mapped to image-up."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-12:
            raise ValueError("viewing direction is parallel to up vector")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(np.stack([x, y, z], axis=1), eye)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    world_to_camera = inverse

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def relative_to(self, other: "Pose") -> tuple[float, float]:
        """Translation distance (m) and rotation angle (deg) between two poses."""
        rel = other.inverse() @ self
        cos = np.clip((np.trace(rel.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.linalg.norm(rel.translation)), float(np.degrees(np.arccos(cos)))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0 or angle == 0.0:
        return np.eye(3)
    k = axis / n
    Kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    R = np.eye(3) + np.sin(angle) * Kx + (1.0 - np.cos(angle)) * (Kx @ Kx)
    # re-orthonormalize so Pose's 1e-9 check never trips on accumulated rounding
    u, _, vt = np.linalg.svd(R)
    return u @ vt


class DepthMap:
    """H x W depth in meters; invalid pixels hold ``-1``."""

    __slots__ = ("values",)

    def __init__(self, values):
        v = np.array(values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"depth must be 2D, got shape {v.shape}")
        bad = ~np.isfinite(v) | (v <= 0)
        v[bad] = INVALID_DEPTH
        v.setflags(write=False)
        self.values = v

    @classmethod
    def invalid(cls, width: int, height: int) -> "DepthMap":
        return cls(np.full((height, width), INVALID_DEPTH))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def validity(self) -> np.ndarray:
        return self.values > 0

    def __repr__(self):
        return f"DepthMap({self.width}x{self.height}, valid={int(self.validity.sum())})"


class ConfidenceMap:
    __slots__ = ("values",)

    def __init__(self, values):
        v = np.array(values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"confidence must be 2D, got shape {v.shape}")
        if v.size and (np.nanmin(v) < 0.0 or np.nanmax(v) > 1.0 or np.isnan(v).any()):
            raise ValueError("confidence values must lie in [0, 1]")
        v.setflags(write=False)
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class Frame:
    id: int
    intrinsics: Intrinsics
    pose: Pose
    image: np.ndarray
    gt_depth: Optional[DepthMap] = None

    def __post_init__(self):
        img = np.array(self.image, dtype=np.float64)
        if img.ndim == 3 and img.shape[2] == 1:
            img = img[..., 0]
        if img.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(
                f"frame {self.id}: image shape {img.shape} does not match intrinsics "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )
        img.setflags(write=False)
        object.__setattr__(self, "image", img)

    def with_pose(self, pose: Pose) -> "Frame":
        return Frame(self.id, self.intrinsics, pose, self.image, self.gt_depth)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_confidence: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if np.isnan(v).any():
            raise ValueError("mesh has NaN vertices")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        c = self.vertex_confidence
        if c is not None:
            c = np.ascontiguousarray(c, dtype=np.float64).reshape(-1)
            if len(c) != len(v):
                raise ValueError("vertex_confidence length must match vertex count")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "vertex_confidence", c)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros(0))

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def transformed(self, pose: Pose) -> "TriangleMesh":
        return TriangleMesh(pose.transform(self.vertices), self.triangles, self.vertex_confidence)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @staticmethod
    def concatenate(meshes) -> "TriangleMesh":
        verts, tris, confs, offset = [], [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            confs.append(m.vertex_confidence if m.vertex_confidence is not None else np.ones(len(m.vertices)))
            offset += len(m.vertices)
        if not verts:
            return TriangleMesh.empty()
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris), np.concatenate(confs))


# --------------------------------------------------------------------------- projection


def project(point, pose: Pose, K: Intrinsics) -> Optional[tuple[float, float, float]]:
    """Project a world point; returns ``(u, v, z)`` or ``None`` when behind the camera."""
    p = pose.inverse().transform(np.asarray(point, dtype=np.float64).reshape(1, 3))[0]
    z = float(p[2])
    if z <= 0.0:
        return None
    return K.fx * p[0] / z + K.cx, K.fy * p[1] / z + K.cy, z


def project_points(points: np.ndarray, pose: Pose, K: Intrinsics):
    """Vectorized ``project``. Returns ``u, v, z`` arrays; ``u, v`` are NaN where ``z <= 0``."""
    p = pose.inverse().transform(points)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, K.fx * p[..., 0] / z + K.cx, np.nan)
        v = np.where(z > 0, K.fy * p[..., 1] / z + K.cy, np.nan)
    return u, v, z


def unproject(u, v, depth, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Lift pixel coordinates with camera-space depth to world points (..., 3)."""
    depth = np.asarray(depth, dtype=np.float64)
    x = (np.asarray(u, dtype=np.float64) - K.cx) / K.fx * depth
    y = (np.asarray(v, dtype=np.float64) - K.cy) / K.fy * depth
    return pose.transform(np.stack(np.broadcast_arrays(x, y, depth), axis=-1))


def in_bounds(u, v, K: Intrinsics):
    """True where ``(u, v)`` can be bilinearly sampled without leaving the image.

    A 1e-9 px slack absorbs roundoff for pixels that map exactly onto the border.
    """
    e = 1e-9
    return (u >= -e) & (u <= K.width - 1 + e) & (v >= -e) & (v <= K.height - 1 + e)


@dataclass(frozen=True)
class WarpResult:
    u: float
    v: float
    z: float
    in_bounds: bool


def warp_pixel(u, v, depth, ref: tuple[Pose, Intrinsics], src: tuple[Pose, Intrinsics]) -> Optional[WarpResult]:
    """Lift reference pixel ``(u, v)`` at ``depth`` and reproject it into the source camera.

    Returns ``None`` if the point lands behind the source camera.
    """
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    ref_pose, ref_K = ref
    src_pose, src_K = src
    X = unproject(u, v, depth, ref_pose, ref_K)
    res = project(X, src_pose, src_K)
    if res is None:
        return None
    us, vs, zs = res
    return WarpResult(us, vs, zs, bool(in_bounds(us, vs, src_K)))


def backproject_depth_map(d: DepthMap, pose: Pose, K: Intrinsics) -> np.ndarray:
    """World points (N, 3) for every valid pixel, row-major order."""
    rows, cols = np.nonzero(d.validity)
    return unproject(cols.astype(np.float64), rows.astype(np.float64), d.values[rows, cols], pose, K)


def bilinear_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup with border clamping; ``u`` indexes columns, ``v`` rows."""
    H, W = image.shape
    u = np.clip(np.nan_to_num(u, nan=0.0), 0.0, W - 1)
    v = np.clip(np.nan_to_num(v, nan=0.0), 0.0, H - 1)
    u0 = np.minimum(np.floor(u).astype(np.int64), W - 2) if W > 1 else np.zeros_like(u, dtype=np.int64)
    v0 = np.minimum(np.floor(v).astype(np.int64), H - 2) if H > 1 else np.zeros_like(v, dtype=np.int64)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = u - u0
    b = v - v0
    return (
        image[v0, u0] * (1 - a) * (1 - b)
        + image[v0, u1] * a * (1 - b)
        + image[v1, u0] * (1 - a) * b
        + image[v1, u1] * a * b
    )


def area_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks (trailing rows/cols are cropped)."""
    H, W = image.shape[:2]
    h, w = H // factor, W // factor
    return image[: h * factor, : w * factor].reshape(h, factor, w, factor).mean(axis=(1, 3))

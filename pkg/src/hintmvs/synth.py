"""Procedural synthetic rooms: analytic ray casting, value-noise textures, scene mutation.

Scene description (JSON, all lengths in meters)::

    {
      "room": {"extents": [4.0, 3.5, 2.5], "ceiling": true},
      "boxes": [{"id": "table", "center": [2, 1.5, 0.4], "size": [1.2, 0.8, 0.8], "yaw_deg": 10}],
      "texture": {"seed": 0, "octaves": 3, "base_cell": 0.3, "amplitude": 0.8},
      "textureless": [{"min": [3.99, 1.0, 0.8], "max": [4.01, 1.6, 1.4]}],
      "light": [0.3, 0.5, 0.8],
      "camera": {"width": 128, "height": 96, "fx": 100, "fy": 100, "cx": 63.5, "cy": 47.5},
      "trajectory": {"type": "waypoints", "eyes": [[...], ...], "targets": [[...], ...], "steps": [10, ...]},
      "depth_gt_noise_sigma": 0.0
    }

The room spans ``[0, extents]``; ``z`` points up. Trajectories are either
``{"type": "poses", "poses": [[16 numbers, row-major camera-to-world], ...]}``,
``{"type": "orbit", "center", "radius", "height", "n_frames", "start_deg", "arc_deg", "look_at"}``
or piecewise-linear ``waypoints`` (``steps[i]`` frames between waypoint i and i+1).
Textureless regions are world-space boxes: any surface point inside one is
rendered with zero texture amplitude.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import INVALID_DEPTH, DepthMap, Frame, Intrinsics, Pose, TriangleMesh

ROOM_FACES = 6


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    id: str
    center: tuple
    size: tuple
    yaw_deg: float = 0.0
    albedo: Optional[float] = None

    def rotation(self) -> np.ndarray:
        a = np.radians(self.yaw_deg)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self) -> np.ndarray:
        h = np.asarray(self.size) / 2
        signs = np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1], indexing="ij")).reshape(3, -1).T
        return (signs * h) @ self.rotation().T + np.asarray(self.center)

    def contains(self, p, margin: float = 0.0) -> bool:
        local = (np.asarray(p) - np.asarray(self.center)) @ self.rotation()
        return bool(np.all(np.abs(local) < np.asarray(self.size) / 2 + margin))


@dataclass(frozen=True)
class SceneSpec:
    extents: tuple = (4.0, 3.5, 2.5)
    ceiling: bool = True
    boxes: tuple = ()
    texture_seed: int = 0
    octaves: int = 3
    base_cell: float = 0.3
    amplitude: float = 0.8
    textureless: tuple = ()  # tuples (min xyz, max xyz)
    light: tuple = (0.3, 0.5, 0.8)
    camera: dict = field(default_factory=lambda: {"width": 128, "height": 96, "fx": 100.0, "fy": 100.0, "cx": 63.5, "cy": 47.5})
    trajectory: dict = field(default_factory=lambda: {"type": "poses", "poses": []})
    depth_gt_noise_sigma: float = 0.0

    def __post_init__(self):
        if len(self.extents) != 3 or min(self.extents) <= 0:
            raise SceneError(f"room extents must be three positive numbers, got {self.extents}")
        ids = [b.id for b in self.boxes]
        if len(set(ids)) != len(ids):
            raise SceneError("box ids must be unique")

    # ------------------------------------------------------------------ json

    def to_dict(self) -> dict:
        return {
            "room": {"extents": list(self.extents), "ceiling": self.ceiling},
            "boxes": [
                {"id": b.id, "center": list(b.center), "size": list(b.size), "yaw_deg": b.yaw_deg,
                 **({"albedo": b.albedo} if b.albedo is not None else {})}
                for b in self.boxes
            ],
            "texture": {"seed": self.texture_seed, "octaves": self.octaves, "base_cell": self.base_cell,
                        "amplitude": self.amplitude},
            "textureless": [{"min": list(lo), "max": list(hi)} for lo, hi in self.textureless],
            "light": list(self.light),
            "camera": dict(self.camera),
            "trajectory": copy.deepcopy(self.trajectory),
            "depth_gt_noise_sigma": self.depth_gt_noise_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        def need(obj, key, path):
            if key not in obj:
                raise SceneError(f"{path}.{key}: missing")
            return obj[key]

        room = need(d, "room", "scene")
        tex = d.get("texture", {})
        boxes = []
        for i, b in enumerate(d.get("boxes", [])):
            boxes.append(Box(
                str(need(b, "id", f"boxes[{i}]")),
                tuple(float(x) for x in need(b, "center", f"boxes[{i}]")),
                tuple(float(x) for x in need(b, "size", f"boxes[{i}]")),
                float(b.get("yaw_deg", 0.0)),
                b.get("albedo"),
            ))
        patches = tuple(
            (tuple(map(float, need(p, "min", f"textureless[{i}]"))), tuple(map(float, need(p, "max", f"textureless[{i}]"))))
            for i, p in enumerate(d.get("textureless", []))
        )
        defaults = cls()
        return cls(
            extents=tuple(float(x) for x in need(room, "extents", "scene.room")),
            ceiling=bool(room.get("ceiling", True)),
            boxes=tuple(boxes),
            texture_seed=int(tex.get("seed", 0)),
            octaves=int(tex.get("octaves", defaults.octaves)),
            base_cell=float(tex.get("base_cell", defaults.base_cell)),
            amplitude=float(tex.get("amplitude", defaults.amplitude)),
            textureless=patches,
            light=tuple(d.get("light", defaults.light)),
            camera=dict(d.get("camera", defaults.camera)),
            trajectory=copy.deepcopy(d.get("trajectory", defaults.trajectory)),
            depth_gt_noise_sigma=float(d.get("depth_gt_noise_sigma", 0.0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        path = Path(path)
        if not path.is_file():
            raise SceneError(f"{path}: scene spec not found")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise SceneError(f"{path}: invalid JSON ({e})") from e

    # ------------------------------------------------------------------ camera

    def intrinsics(self) -> Intrinsics:
        c = self.camera
        return Intrinsics(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]), int(c["width"]), int(c["height"]))

    def poses(self) -> list[Pose]:
        traj = self.trajectory
        kind = traj.get("type", "poses")
        if kind == "poses":
            poses = [Pose.from_matrix(np.asarray(p, dtype=np.float64).reshape(4, 4)) for p in traj.get("poses", [])]
        elif kind == "orbit":
            center = np.asarray(traj["center"], dtype=np.float64)
            look = np.asarray(traj.get("look_at", center), dtype=np.float64)
            n = int(traj["n_frames"])
            start = np.radians(traj.get("start_deg", 0.0))
            arc = np.radians(traj.get("arc_deg", 360.0))
            poses = []
            for i in range(n):
                a = start + arc * i / max(n - 1, 1)
                eye = center + np.array([traj["radius"] * np.cos(a), traj["radius"] * np.sin(a), traj["height"]])
                poses.append(Pose.look_at(eye, look))
        elif kind == "waypoints":
            eyes = np.asarray(traj["eyes"], dtype=np.float64)
            targets = np.asarray(traj["targets"], dtype=np.float64)
            steps = traj.get("steps") or [10] * (len(eyes) - 1)
            poses = []
            for i in range(len(eyes) - 1):
                for s in range(steps[i]):
                    f = s / steps[i]
                    poses.append(Pose.look_at((1 - f) * eyes[i] + f * eyes[i + 1], (1 - f) * targets[i] + f * targets[i + 1]))
            poses.append(Pose.look_at(eyes[-1], targets[-1]))
        else:
            raise SceneError(f"trajectory.type: unknown trajectory type {kind!r}")
        for i, p in enumerate(poses):
            if not self.in_free_space(p.translation):
                raise SceneError(f"trajectory[{i}]: camera at {p.translation.tolist()} is not in free space")
        return poses

    def in_free_space(self, p) -> bool:
        p = np.asarray(p, dtype=np.float64)
        if np.any(p <= 0) or np.any(p >= np.asarray(self.extents)):
            return False
        return not any(b.contains(p) for b in self.boxes)

    def box(self, object_id: str) -> Box:
        for b in self.boxes:
            if b.id == object_id:
                return b
        raise SceneError(f"unknown object id {object_id!r}")

    def surface_count(self) -> int:
        return ROOM_FACES + 6 * len(self.boxes)


# --------------------------------------------------------------------------- texture


def _hash_uniform(ix, iy, salt: int) -> np.ndarray:
    """Deterministic per-lattice-point uniforms in [0, 1) (splitmix64 finalizer)."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ (iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F))
        h ^= np.uint64(salt & 0xFFFFFFFFFFFFFFFF)
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(s: np.ndarray, t: np.ndarray, seed: int, surface: np.ndarray, octaves: int, base_cell: float) -> np.ndarray:
    """Smooth multi-octave value noise in [0, 1] over surface coordinates ``(s, t)``."""
    total = np.zeros_like(s)
    norm = 0.0
    surface = np.asarray(surface, dtype=np.int64)
    for o in range(octaves):
        cell = base_cell / 2**o
        x = s / cell + 1000.0
        y = t / cell + 1000.0
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        fx = fx * fx * (3 - 2 * fx)
        fy = fy * fy * (3 - 2 * fy)
        ix = x0.astype(np.int64)
        iy = y0.astype(np.int64)
        key = ix + (surface * 1_000_003 + seed * 7919 + o * 104729) * 65537
        v00 = _hash_uniform(key, iy, 1)
        v10 = _hash_uniform(key + 1, iy, 1)
        v01 = _hash_uniform(key, iy + 1, 1)
        v11 = _hash_uniform(key + 1, iy + 1, 1)
        n = (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy
        amp = 0.5**o
        total += amp * n
        norm += amp
    return total / norm


# --------------------------------------------------------------------------- ray casting


@dataclass
class RaycastResult:
    depth: np.ndarray  # camera-space z, -1 where nothing is hit
    surface: np.ndarray  # surface id, -1 for misses
    points: np.ndarray  # (H, W, 3) world hit points (NaN for misses)
    normals: np.ndarray  # (H, W, 3) world normals facing the camera
    uv: np.ndarray  # (H, W, 2) surface texture coordinates
    textureless: np.ndarray  # bool mask of hits inside a textureless region


def raycast(spec: SceneSpec, pose: Pose, K: Intrinsics) -> RaycastResult:
    xn, yn = K.pixel_rays()
    d_cam = np.stack([xn, yn, np.ones_like(xn)], axis=-1).reshape(-1, 3)
    dirs = d_cam @ pose.rotation.T  # ray parameter == camera-space depth
    o = pose.translation
    n = len(dirs)
    best_t = np.full(n, np.inf)
    surf = np.full(n, -1, dtype=np.int64)
    normal = np.zeros((n, 3))
    uv = np.zeros((n, 2))

    ext = np.asarray(spec.extents, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        # room: exit through the interior faces
        t_axis = np.where(dirs > 0, (ext - o) / dirs, np.where(dirs < 0, -o / dirs, np.inf))
    axis = np.argmin(t_axis, axis=1)
    t_room = t_axis[np.arange(n), axis]
    side = (dirs[np.arange(n), axis] > 0).astype(np.int64)
    face = axis * 2 + side
    hit = np.isfinite(t_room) & (t_room > 0)
    if not spec.ceiling:
        hit &= face != 5
    best_t[hit] = t_room[hit]
    surf[hit] = face[hit]
    nrm = np.zeros((n, 3))
    nrm[np.arange(n), axis] = np.where(side == 1, -1.0, 1.0)
    normal[hit] = nrm[hit]
    P = o + dirs * t_room[:, None]
    others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    uv[hit] = np.take_along_axis(P, others, axis=1)[hit]

    for bi, box in enumerate(spec.boxes):
        R = box.rotation()
        lo_ = o - np.asarray(box.center)
        ol = lo_ @ R
        dl = dirs @ R
        h = np.asarray(box.size) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - ol) / dl
            t2 = (h - ol) / dl
        t1 = np.where(dl == 0, np.where(np.abs(ol) <= h, -np.inf, np.inf), t1)
        t2 = np.where(dl == 0, np.where(np.abs(ol) <= h, np.inf, -np.inf), t2)
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        bhit = (t_near <= t_far) & (t_near > 0) & (t_near < best_t)
        if not bhit.any():
            continue
        ax = np.argmax(tmin, axis=1)
        sgn = dl[np.arange(n), ax] > 0  # entering through the negative face
        best_t[bhit] = t_near[bhit]
        surf[bhit] = ROOM_FACES + 6 * bi + ax[bhit] * 2 + (~sgn[bhit]).astype(np.int64)
        ln = np.zeros((n, 3))
        ln[np.arange(n), ax] = np.where(sgn, -1.0, 1.0)
        normal[bhit] = (ln @ R.T)[bhit]
        Pl = ol + dl * t_near[:, None]
        oth = np.array([[1, 2], [0, 2], [0, 1]])[ax]
        uv[bhit] = np.take_along_axis(Pl, oth, axis=1)[bhit]

    valid = np.isfinite(best_t)
    depth = np.where(valid, best_t, INVALID_DEPTH)
    points = np.where(valid[:, None], o + dirs * np.where(valid, best_t, 0.0)[:, None], np.nan)
    tl = np.zeros(n, dtype=bool)
    for lo, hi in spec.textureless:
        tl |= valid & np.all((points >= np.asarray(lo)) & (points <= np.asarray(hi)), axis=1)
    H, W = K.height, K.width
    return RaycastResult(
        depth.reshape(H, W), surf.reshape(H, W), points.reshape(H, W, 3),
        normal.reshape(H, W, 3), uv.reshape(H, W, 2), tl.reshape(H, W),
    )


def surface_albedo(spec: SceneSpec, surface: np.ndarray) -> np.ndarray:
    base = 0.35 + 0.3 * _hash_uniform(surface, np.zeros_like(surface), spec.texture_seed + 17)
    out = base.copy()
    for bi, b in enumerate(spec.boxes):
        if b.albedo is not None:
            sel = (surface >= ROOM_FACES + 6 * bi) & (surface < ROOM_FACES + 6 * (bi + 1))
            out[sel] = b.albedo
    return out


def shade(spec: SceneSpec, hits: RaycastResult) -> np.ndarray:
    valid = hits.depth > 0
    surf = np.where(valid, hits.surface, 0)
    noise = value_noise(hits.uv[..., 0], hits.uv[..., 1], spec.texture_seed, surf, spec.octaves, spec.base_cell)
    amp = np.where(hits.textureless, 0.0, spec.amplitude)
    albedo = np.clip(surface_albedo(spec, surf) + amp * (noise - 0.5), 0.0, 1.0)
    light = np.asarray(spec.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lambert = np.abs(np.nan_to_num(hits.normals) @ light)
    return np.where(valid, albedo * (0.35 + 0.65 * lambert), 0.0)


def render_synthetic_frame(spec: SceneSpec, pose: Pose, K: Optional[Intrinsics] = None, frame_id: int = 0) -> Frame:
    """Exact ray-cast GT depth plus a shaded, textured grayscale image."""
    K = K if K is not None else spec.intrinsics()
    hits = raycast(spec, pose, K)
    image = shade(spec, hits)
    depth = hits.depth
    if spec.depth_gt_noise_sigma > 0:
        rng = np.random.default_rng([spec.texture_seed, frame_id])
        depth = np.where(depth > 0, depth + rng.normal(0.0, spec.depth_gt_noise_sigma, depth.shape), depth)
    return Frame(frame_id, K, pose, image, DepthMap(depth))


def render_sequence(spec: SceneSpec) -> list[Frame]:
    K = spec.intrinsics()
    return [render_synthetic_frame(spec, p, K, i) for i, p in enumerate(spec.poses())]


# --------------------------------------------------------------------------- mutation


def _boxes_overlap(a: Box, b: Box) -> bool:
    za = (a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2)
    zb = (b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2)
    if za[1] <= zb[0] or zb[1] <= za[0]:
        return False
    ca, cb = a.corners()[:, :2], b.corners()[:, :2]
    axes = [a.rotation()[:2, 0], a.rotation()[:2, 1], b.rotation()[:2, 0], b.rotation()[:2, 1]]
    for ax in axes:
        pa, pb = ca @ ax, cb @ ax
        if pa.max() <= pb.min() + 1e-9 or pb.max() <= pa.min() + 1e-9:
            return False
    return True


def mutate_scene(spec: SceneSpec, object_id: str, center, yaw_deg: Optional[float] = None) -> SceneSpec:
    """Copy of ``spec`` with one box moved; raises :class:`SceneError` on collisions."""
    old = spec.box(object_id)
    new = replace(old, center=tuple(float(x) for x in center), yaw_deg=old.yaw_deg if yaw_deg is None else float(yaw_deg))
    if new == old:
        return spec
    corners = new.corners()
    if np.any(corners < -1e-9) or np.any(corners > np.asarray(spec.extents) + 1e-9):
        raise SceneError(f"moving {object_id!r} to {list(new.center)} collides with the room walls")
    for b in spec.boxes:
        if b.id != object_id and _boxes_overlap(new, b):
            raise SceneError(f"moving {object_id!r} to {list(new.center)} collides with {b.id!r}")
    return replace(spec, boxes=tuple(new if b.id == object_id else b for b in spec.boxes))


# --------------------------------------------------------------------------- GT geometry


def scene_mesh(spec: SceneSpec) -> TriangleMesh:
    """Triangle mesh of every scene surface (two triangles per face)."""
    X, Y, Z = spec.extents
    room = Box("room", (X / 2, Y / 2, Z / 2), (X, Y, Z))
    meshes = [_box_mesh(room, skip_face=5 if not spec.ceiling else None)]
    meshes += [_box_mesh(b) for b in spec.boxes]
    return TriangleMesh.concatenate(meshes)


_FACE_QUADS = {
    # face id (axis * 2 + side) -> corner indices from Box.corners() (x-major, then y, then z)
    0: (0, 1, 3, 2), 1: (4, 6, 7, 5),
    2: (0, 4, 5, 1), 3: (2, 3, 7, 6),
    4: (0, 2, 6, 4), 5: (1, 5, 7, 3),
}


def _box_mesh(box: Box, skip_face: Optional[int] = None) -> TriangleMesh:
    corners = box.corners()
    tris = []
    for f, (a, b, c, d) in _FACE_QUADS.items():
        if f == skip_face:
            continue
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(corners, np.array(tris, dtype=np.int64), np.ones(8))


def sample_scene_surface(spec: SceneSpec, n_points: int, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted samples over every analytic scene surface."""
    from .evaluation import sample_mesh

    return sample_mesh(scene_mesh(spec), n_points, seed)

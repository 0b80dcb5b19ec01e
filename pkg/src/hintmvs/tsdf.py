"""Voxel-hashed TSDF with a per-voxel confidence channel.

Voxel ``(i, j, k)`` of block ``(bx, by, bz)`` sits at world position
``((8 * bx + i) * voxel_size, (8 * by + j) * voxel_size, (8 * bz + k) * voxel_size)``.
The signed distance is stored in truncation units and is positive on the camera
(free-space) side of a surface.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import ConfidenceMap, DepthMap, Intrinsics, Pose

BLOCK = 8
MAGIC = b"DTTV"
FORMAT_VERSION = 1
FLAG_MASK = 1


class VolumeFormatError(ValueError):
    """Raised when a volume file is truncated, corrupt, or from another format version."""


@dataclass(frozen=True)
class TsdfConfig:
    voxel_size: float = 0.02
    truncation: float = 0.06
    max_fuse_depth: float = 3.0
    weight_cap: int = 128
    confidence_floor: float = 0.25

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.truncation < self.voxel_size:
            raise ValueError("truncation must be at least one voxel")
        if self.max_fuse_depth <= 0:
            raise ValueError("max_fuse_depth must be positive")
        if self.weight_cap <= 0:
            raise ValueError("weight_cap must be positive")


def observation_weight(z, config: TsdfConfig = TsdfConfig()):
    """Quadratic distance falloff, clamped below at ``config.confidence_floor``.

    Distances beyond ``max_fuse_depth`` get the floor value.
    """
    z = np.asarray(z, dtype=np.float64)
    w = np.maximum(config.confidence_floor, (1.0 - z / config.max_fuse_depth) ** 2)
    w = np.where(z > config.max_fuse_depth, config.confidence_floor, w)
    return w if w.ndim else float(w)


class TsdfVolume:
    def __init__(self, config: TsdfConfig = TsdfConfig(), is_mask: bool = False):
        self.config = config
        self.is_mask = is_mask
        self._index: dict[tuple[int, int, int], int] = {}
        self._coords = np.zeros((0, 3), dtype=np.int32)
        self._tsdf = np.zeros((0, BLOCK, BLOCK, BLOCK), dtype=np.float32)
        self._weight = np.zeros((0, BLOCK, BLOCK, BLOCK), dtype=np.float32)
        self._conf = np.zeros((0, BLOCK, BLOCK, BLOCK), dtype=np.float32)
        self._n = 0

    # ------------------------------------------------------------------ storage

    @property
    def n_blocks(self) -> int:
        return self._n

    @property
    def block_coords(self) -> np.ndarray:
        return self._coords[: self._n]

    @property
    def tsdf(self) -> np.ndarray:
        return self._tsdf[: self._n]

    @property
    def weight(self) -> np.ndarray:
        return self._weight[: self._n]

    @property
    def confidence(self) -> np.ndarray:
        return self._conf[: self._n]

    def block(self, coord) -> Optional[int]:
        return self._index.get(tuple(int(c) for c in coord))

    def _grow(self, needed: int):
        cap = len(self._coords)
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap, 64)

        def grow(a, fill):
            out = np.full((new_cap,) + a.shape[1:], fill, dtype=a.dtype)
            out[: self._n] = a[: self._n]
            return out

        self._coords = grow(self._coords, 0)
        self._tsdf = grow(self._tsdf, 1.0)
        self._weight = grow(self._weight, 0.0)
        self._conf = grow(self._conf, 0.0)

    def allocate(self, coords: np.ndarray) -> np.ndarray:
        """Ensure blocks exist; returns their slot indices in input order."""
        coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
        new = [tuple(c) for c in coords.tolist() if tuple(c) not in self._index]
        new = list(dict.fromkeys(new))
        if new:
            self._grow(self._n + len(new))
            for c in new:
                self._index[c] = self._n
                self._coords[self._n] = c
                self._tsdf[self._n] = 1.0
                self._weight[self._n] = 0.0
                self._conf[self._n] = 0.0
                self._n += 1
        return np.array([self._index[tuple(c)] for c in coords.tolist()], dtype=np.int64)

    def voxel_centers(self, slots: np.ndarray) -> np.ndarray:
        """World positions of every voxel in the given blocks, shape (len(slots), 8, 8, 8, 3)."""
        local = np.stack(np.meshgrid(*(np.arange(BLOCK),) * 3, indexing="ij"), axis=-1)
        base = self._coords[slots].astype(np.int64) * BLOCK
        return (base[:, None, None, None, :] + local[None]) * self.config.voxel_size

    def copy(self) -> "TsdfVolume":
        out = TsdfVolume(self.config, self.is_mask)
        out._index = dict(self._index)
        out._n = self._n
        out._coords = self._coords[: self._n].copy()
        out._tsdf = self._tsdf[: self._n].copy()
        out._weight = self._weight[: self._n].copy()
        out._conf = self._conf[: self._n].copy()
        return out

    def __eq__(self, other):
        if not isinstance(other, TsdfVolume):
            return NotImplemented
        if self.config != other.config or self.is_mask != other.is_mask or self._n != other._n:
            return False
        order_a = np.lexsort(self.block_coords.T[::-1])
        order_b = np.lexsort(other.block_coords.T[::-1])
        return (
            np.array_equal(self.block_coords[order_a], other.block_coords[order_b])
            and np.array_equal(self.tsdf[order_a], other.tsdf[order_b])
            and np.array_equal(self.weight[order_a], other.weight[order_b])
            and np.array_equal(self.confidence[order_a], other.confidence[order_b])
        )

    # ------------------------------------------------------------------ dense view

    def dense(self, pad: int = 1):
        """Dense copy over the bounding box of allocated blocks.

        Returns ``(origin_index, tsdf, weight, confidence)`` where ``origin_index``
        is the global voxel index of element ``[0, 0, 0]``. Unallocated space has
        weight 0. ``pad`` extra unobserved voxels surround the box.
        """
        if self._n == 0:
            z = np.zeros((0, 0, 0), dtype=np.float32)
            return np.zeros(3, dtype=np.int64), z, z.copy(), z.copy()
        coords = self.block_coords.astype(np.int64)
        lo = coords.min(axis=0) * BLOCK - pad
        hi = (coords.max(axis=0) + 1) * BLOCK + pad
        shape = tuple(hi - lo)
        tsdf = np.ones(shape, dtype=np.float32)
        weight = np.zeros(shape, dtype=np.float32)
        conf = np.zeros(shape, dtype=np.float32)
        off = coords * BLOCK - lo
        for s in range(self._n):
            x, y, z = off[s]
            sl = np.s_[x : x + BLOCK, y : y + BLOCK, z : z + BLOCK]
            tsdf[sl] = self._tsdf[s]
            weight[sl] = self._weight[s]
            conf[sl] = self._conf[s]
        return lo, tsdf, weight, conf

    # ------------------------------------------------------------------ integration

    def _blocks_along_rays(self, depth: np.ndarray, K: Intrinsics, pose: Pose) -> np.ndarray:
        cfg = self.config
        rows, cols = np.nonzero(depth > 0)
        if len(rows) == 0:
            return np.zeros((0, 3), dtype=np.int32)
        d = depth[rows, cols]
        xn = (cols - K.cx) / K.fx
        yn = (rows - K.cy) / K.fy
        step = cfg.voxel_size * 0.5
        n_steps = int(np.ceil(2 * cfg.truncation / step)) + 1
        offsets = np.linspace(-cfg.truncation, cfg.truncation, n_steps)
        z = np.maximum(d[:, None] + offsets[None, :], 1e-6)
        pts_cam = np.stack([xn[:, None] * z, yn[:, None] * z, z], axis=-1).reshape(-1, 3)
        pts = pose.transform(pts_cam)
        blocks = np.floor(pts / (cfg.voxel_size * BLOCK) + 0.5 / BLOCK).astype(np.int64)
        return np.unique(blocks, axis=0).astype(np.int32)

    def integrate(
        self,
        depth: DepthMap,
        pose: Pose,
        K: Intrinsics,
        confidence_of_depth: Optional[ConfidenceMap] = None,
    ) -> "TsdfVolume":
        """Fuse one depth map by projective association. Modifies and returns ``self``."""
        if (depth.width, depth.height) != (K.width, K.height):
            raise ValueError(
                f"depth map {depth.width}x{depth.height} does not match intrinsics {K.width}x{K.height}"
            )
        if confidence_of_depth is not None and confidence_of_depth.values.shape != depth.values.shape:
            raise ValueError("confidence map shape must match depth map")
        cfg = self.config
        d = depth.values.copy()
        d[(d <= 0) | (d > cfg.max_fuse_depth)] = -1.0

        coords = self._blocks_along_rays(d, K, pose)
        if len(coords) == 0:
            return self
        slots = self.allocate(coords)

        X = self.voxel_centers(slots).reshape(-1, 3)
        Xc = pose.inverse().transform(X)
        z = Xc[:, 2]
        front = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(K.fx * Xc[:, 0] / z + K.cx)
            v = np.rint(K.fy * Xc[:, 1] / z + K.cy)
        ok = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        idx = np.nonzero(ok)[0]
        ui = u[idx].astype(np.int64)
        vi = v[idx].astype(np.int64)
        dp = d[vi, ui]
        keep = (dp > 0) & (z[idx] <= dp + cfg.truncation)
        idx, ui, vi, dp = idx[keep], ui[keep], vi[keep], dp[keep]
        if len(idx) == 0:
            return self
        zv = z[idx]

        sdf = np.clip((dp - zv) / cfg.truncation, -1.0, 1.0)
        w_obs = observation_weight(zv, cfg)
        if confidence_of_depth is None:
            c_obs = w_obs
        else:
            c_obs = confidence_of_depth.values[vi, ui]

        flat_t = self._tsdf[: self._n].reshape(-1)
        flat_w = self._weight[: self._n].reshape(-1)
        flat_c = self._conf[: self._n].reshape(-1)
        gidx = slots[idx // BLOCK**3] * BLOCK**3 + idx % BLOCK**3

        w = flat_w[gidx].astype(np.float64)
        t = flat_t[gidx].astype(np.float64)
        c = flat_c[gidx].astype(np.float64)
        wsum = w + w_obs
        flat_t[gidx] = np.clip((w * t + w_obs * sdf) / wsum, -1.0, 1.0)
        flat_c[gidx] = np.clip((w * c + w_obs * c_obs) / wsum, 0.0, 1.0)
        flat_w[gidx] = np.minimum(wsum, cfg.weight_cap)
        return self

    # ------------------------------------------------------------------ queries

    def _lookup(self, gidx: np.ndarray):
        """Values at global voxel indices (N, 3); unallocated voxels report weight 0."""
        b = np.floor_divide(gidx, BLOCK)
        loc = gidx - b * BLOCK
        slots = np.array([self._index.get(tuple(c), -1) for c in b.tolist()], dtype=np.int64)
        t = np.ones(len(gidx))
        w = np.zeros(len(gidx))
        c = np.zeros(len(gidx))
        hit = slots >= 0
        if hit.any():
            s, l = slots[hit], loc[hit]
            t[hit] = self._tsdf[s, l[:, 0], l[:, 1], l[:, 2]]
            w[hit] = self._weight[s, l[:, 0], l[:, 1], l[:, 2]]
            c[hit] = self._conf[s, l[:, 0], l[:, 1], l[:, 2]]
        return t, w, c

    def sample_points(self, points: np.ndarray):
        """Trilinear ``(tsdf, confidence, weight, observed)`` arrays for many points.

        A point is unobserved when any corner with nonzero interpolation weight
        has fusion weight 0.
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) / self.config.voxel_size
        base = np.floor(p).astype(np.int64)
        frac = p - base
        tsdf = np.zeros(len(p))
        conf = np.zeros(len(p))
        weight = np.zeros(len(p))
        observed = np.ones(len(p), dtype=bool)
        for corner in np.ndindex(2, 2, 2):
            o = np.array(corner)
            wi = np.prod(np.where(o == 1, frac, 1.0 - frac), axis=1)
            t, w, c = self._lookup(base + o)
            observed &= ~((wi > 0) & (w <= 0))
            tsdf += wi * t
            conf += wi * c
            weight += wi * w
        return tsdf, conf, weight, observed

    def sample(self, point) -> Optional[tuple[float, float, float]]:
        """Trilinear ``(tsdf, confidence, weight)`` at a world point, or ``None`` if unobserved."""
        t, c, w, ok = self.sample_points(np.asarray(point, dtype=np.float64).reshape(1, 3))
        if not ok[0]:
            return None
        return float(t[0]), float(c[0]), float(w[0])

    # ------------------------------------------------------------------ persistence

    def to_bytes(self) -> bytes:
        cfg = self.config
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", FORMAT_VERSION, FLAG_MASK if self.is_mask else 0))
        buf.write(
            struct.pack(
                "<dddId", cfg.voxel_size, cfg.truncation, cfg.max_fuse_depth, cfg.weight_cap, cfg.confidence_floor
            )
        )
        buf.write(struct.pack("<Q", self._n))
        order = np.lexsort(self.block_coords.T[::-1])
        for s in order:
            buf.write(self._coords[s].astype("<i4").tobytes())
            vox = np.stack([self._tsdf[s], self._weight[s], self._conf[s]], axis=-1).astype("<f4")
            buf.write(vox.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TsdfVolume":
        header = struct.calcsize("<II") + struct.calcsize("<dddId") + struct.calcsize("<Q")
        if len(data) < 4 + header or data[:4] != MAGIC:
            raise VolumeFormatError("not a DTTV volume file")
        off = 4
        version, flags = struct.unpack_from("<II", data, off)
        if version != FORMAT_VERSION:
            raise VolumeFormatError(f"unsupported volume format version {version}")
        off += 8
        vs, tr, md, cap, floor = struct.unpack_from("<dddId", data, off)
        off += struct.calcsize("<dddId")
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        block_bytes = 12 + BLOCK**3 * 12
        if len(data) != off + n * block_bytes:
            raise VolumeFormatError(
                f"volume file size mismatch: expected {off + n * block_bytes} bytes, got {len(data)}"
            )
        try:
            cfg = TsdfConfig(vs, tr, md, cap, floor)
        except ValueError as e:
            raise VolumeFormatError(f"corrupt volume config: {e}") from e
        vol = cls(cfg, is_mask=bool(flags & FLAG_MASK))
        if n == 0:
            return vol
        raw = np.frombuffer(data, dtype=np.uint8, count=n * block_bytes, offset=off).reshape(n, block_bytes)
        coords = raw[:, :12].copy().view("<i4").reshape(n, 3)
        vox = raw[:, 12:].copy().view("<f4").reshape(n, BLOCK, BLOCK, BLOCK, 3)
        vol._grow(n)
        vol._coords[:n] = coords
        vol._tsdf[:n] = vox[..., 0]
        vol._weight[:n] = vox[..., 1]
        vol._conf[:n] = vox[..., 2]
        vol._n = n
        vol._index = {tuple(c): i for i, c in enumerate(coords.tolist())}
        if len(vol._index) != n:
            raise VolumeFormatError("duplicate block coordinates in volume file")
        return vol

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TsdfVolume":
        return cls.from_bytes(Path(path).read_bytes())

    def config_dict(self) -> dict:
        return asdict(self.config)


def integrate(volume: TsdfVolume, depth: DepthMap, pose: Pose, K: Intrinsics, confidence_of_depth=None) -> TsdfVolume:
    return volume.integrate(depth, pose, K, confidence_of_depth)


def sample_tsdf(volume: TsdfVolume, point):
    return volume.sample(point)

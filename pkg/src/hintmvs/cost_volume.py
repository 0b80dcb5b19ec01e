"""Plane-sweep cost volumes scored by zero-mean normalized cross-correlation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .geometry import Frame, Intrinsics, Pose, area_downsample, bilinear_sample, in_bounds

PATCH_SIZE = 5
DOWNSAMPLE = 4
VARIANCE_EPS = 1e-8


@dataclass(frozen=True)
class DepthPlanes:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(v) < 2 or not np.all(np.diff(v) > 0) or v[0] <= 0:
            raise ValueError("depth planes must be positive and strictly increasing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def d_min(self) -> float:
        return float(self.values[0])

    @property
    def d_max(self) -> float:
        return float(self.values[-1])

    def spacing(self) -> np.ndarray:
        """Local plane spacing in meters (central differences, one-sided at the ends)."""
        return np.gradient(self.values)


def make_planes(count: int = 64, d_min: float = 0.25, d_max: float = 5.0) -> DepthPlanes:
    """``count`` depths whose reciprocals are evenly spaced between ``1/d_min`` and ``1/d_max``."""
    if count < 2:
        raise ValueError(f"need at least 2 planes, got {count}")
    if not 0 < d_min < d_max:
        raise ValueError(f"need 0 < d_min < d_max, got d_min={d_min}, d_max={d_max}")
    inv = np.linspace(1.0 / d_min, 1.0 / d_max, count)
    values = 1.0 / inv
    values[0], values[-1] = d_min, d_max
    return DepthPlanes(values)


@dataclass(frozen=True, eq=False)
class CostVolume:
    scores: np.ndarray  # (D, H, W), higher is a better match
    valid_count: np.ndarray  # (D, H, W), sources with an in-bounds warp

    def __post_init__(self):
        if self.scores.shape != self.valid_count.shape or self.scores.ndim != 3:
            raise ValueError("scores and valid_count must share a (D, H, W) shape")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.scores.shape

    def with_scores(self, scores: np.ndarray) -> "CostVolume":
        return CostVolume(scores, self.valid_count)


def matching_score(ref_patch: np.ndarray, src_patch: np.ndarray) -> float:
    """Zero-mean NCC of two equally sized patches; 0 if either is (nearly) constant."""
    a = np.asarray(ref_patch, dtype=np.float64).ravel()
    b = np.asarray(src_patch, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("patches must have the same size")
    a = a - a.mean()
    b = b - b.mean()
    va = np.mean(a * a)
    vb = np.mean(b * b)
    if va < VARIANCE_EPS or vb < VARIANCE_EPS:
        return 0.0
    return float(np.clip(np.mean(a * b) / np.sqrt(va * vb), -1.0, 1.0))


def _window_stats(img: np.ndarray):
    mean = uniform_filter(img, PATCH_SIZE, mode="nearest")
    var = uniform_filter(img * img, PATCH_SIZE, mode="nearest") - mean * mean
    return mean, np.maximum(var, 0.0)


def ncc_map(ref: np.ndarray, warped: np.ndarray, ref_stats=None) -> np.ndarray:
    """Per-pixel NCC over ``PATCH_SIZE`` windows (edge-replicated borders)."""
    mr, vr = ref_stats if ref_stats is not None else _window_stats(ref)
    mw, vw = _window_stats(warped)
    cov = uniform_filter(ref * warped, PATCH_SIZE, mode="nearest") - mr * mw
    ok = (vr >= VARIANCE_EPS) & (vw >= VARIANCE_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(ok, cov / np.sqrt(vr * vw), 0.0)
    return np.clip(score, -1.0, 1.0)


def prepare_frame(frame: Frame, factor: int = DOWNSAMPLE) -> tuple[np.ndarray, Intrinsics]:
    """Area-downsampled image and matching intrinsics at cost-volume resolution."""
    return area_downsample(frame.image, factor), frame.intrinsics.downsampled(factor)


def plane_warp_grid(ref_pose: Pose, ref_K: Intrinsics, src_pose: Pose, src_K: Intrinsics, depth: float):
    """Source-image coordinates of every reference pixel lifted to a fronto-parallel plane."""
    xn, yn = ref_K.pixel_rays()
    pts_ref = np.stack([xn * depth, yn * depth, np.full_like(xn, depth)], axis=-1)
    rel = src_pose.inverse() @ ref_pose
    p = rel.transform(pts_ref)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = src_K.fx * p[..., 0] / z + src_K.cx
        v = src_K.fy * p[..., 1] / z + src_K.cy
    ok = (z > 0) & in_bounds(u, v, src_K)
    return u, v, ok


def build_cost_volume(ref: Frame, sources: Sequence[Frame], planes: DepthPlanes) -> CostVolume:
    """NCC plane sweep at 1/4 resolution, averaged over sources whose warp stays in bounds."""
    if not sources:
        raise ValueError("build_cost_volume needs at least one source frame")
    ref_img, ref_K = prepare_frame(ref)
    ref_stats = _window_stats(ref_img)
    prepared = [prepare_frame(s) + (s.pose,) for s in sources]
    D = planes.count
    H, W = ref_img.shape
    total = np.zeros((D, H, W))
    count = np.zeros((D, H, W), dtype=np.int32)
    for di, depth in enumerate(planes.values):
        for src_img, src_K, src_pose in prepared:
            u, v, ok = plane_warp_grid(ref.pose, ref_K, src_pose, src_K, depth)
            if not ok.any():
                continue
            warped = bilinear_sample(src_img, u, v)
            score = ncc_map(ref_img, warped, ref_stats)
            total[di] += np.where(ok, score, 0.0)
            count[di] += ok
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return CostVolume(scores, count)


# --------------------------------------------------------------------------- raw dump

_DUMP_MAGIC = b"DTCV"


def write_cost_volume(path, cv: CostVolume) -> None:
    """Little-endian dump: magic, D, H, W (u32), f32 scores, u8 valid counts."""
    D, H, W = cv.shape
    with open(path, "wb") as f:
        f.write(_DUMP_MAGIC + struct.pack("<III", D, H, W))
        f.write(np.asarray(cv.scores, dtype="<f4").tobytes())
        f.write(np.asarray(np.minimum(cv.valid_count, 255), dtype="u1").tobytes())


def read_cost_volume(path) -> CostVolume:
    data = Path(path).read_bytes()
    if data[:4] != _DUMP_MAGIC:
        raise ValueError(f"{path}: not a cost volume dump")
    D, H, W = struct.unpack_from("<III", data, 4)
    n = D * H * W
    if len(data) != 16 + 5 * n:
        raise ValueError(f"{path}: truncated cost volume dump")
    scores = np.frombuffer(data, dtype="<f4", count=n, offset=16).reshape(D, H, W).astype(np.float64)
    valid = np.frombuffer(data, dtype="u1", count=n, offset=16 + 4 * n).reshape(D, H, W).astype(np.int32)
    return CostVolume(scores, valid)

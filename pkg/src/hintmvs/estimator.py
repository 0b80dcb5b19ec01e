"""Cost volume -> depth map: box-filter regularization, soft-argmax, parabola refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .cost_volume import CostVolume, DepthPlanes
from .geometry import INVALID_DEPTH, DepthMap


@dataclass(frozen=True)
class EstimatorConfig:
    box_filter_radius: int = 2
    softargmax_temperature: float = 10.0
    min_valid_sources: int = 1
    refine: bool = True

    def __post_init__(self):
        if self.box_filter_radius < 0:
            raise ValueError("box_filter_radius must be >= 0")
        if self.softargmax_temperature <= 0:
            raise ValueError("softargmax_temperature must be positive")


def regularize(cv: CostVolume, cfg: EstimatorConfig = EstimatorConfig()) -> CostVolume:
    """Per-plane box filter over valid cells, normalized by the valid count in each window."""
    r = cfg.box_filter_radius
    if r == 0:
        return cv
    size = (1, 2 * r + 1, 2 * r + 1)
    valid = (cv.valid_count > 0).astype(np.float64)
    num = uniform_filter(np.where(valid > 0, cv.scores, 0.0), size, mode="constant")
    den = uniform_filter(valid, size, mode="constant")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where((valid > 0) & (den > 1e-12), num / den, 0.0)
    return CostVolume(out, cv.valid_count)


def _softmax(scores: np.ndarray, valid: np.ndarray, temperature: float) -> np.ndarray:
    logits = np.where(valid, temperature * scores, -np.inf)
    m = logits.max(axis=0, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(valid, np.exp(logits - m), 0.0)
    s = e.sum(axis=0, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def estimate(cv: CostVolume, planes: DepthPlanes, cfg: EstimatorConfig = EstimatorConfig()):
    """Depth map plus a per-pixel certainty in [0, 1].

    Certainty is the softmax mass within one plane of the argmax; it is near
    ``3 / D`` for flat (textureless) score profiles and near 1 for sharp peaks.
    """
    scores = cv.scores
    D, H, W = scores.shape
    if D != planes.count:
        raise ValueError(f"cost volume has {D} planes, expected {planes.count}")
    valid = cv.valid_count > 0
    any_valid = valid.any(axis=0)
    inv_planes = 1.0 / planes.values

    prob = _softmax(scores, valid, cfg.softargmax_temperature)
    inv_depth = np.tensordot(inv_planes, prob, axes=(0, 0))

    masked = np.where(valid, scores, -np.inf)
    k = np.argmax(masked, axis=0)
    rows, cols = np.indices((H, W))

    if cfg.refine:
        interior = (k > 0) & (k < D - 1)
        km = np.clip(k - 1, 0, D - 1)
        kp = np.clip(k + 1, 0, D - 1)
        neighbours_ok = interior & valid[km, rows, cols] & valid[kp, rows, cols]
        s0 = scores[km, rows, cols]
        s1 = scores[k, rows, cols]
        s2 = scores[kp, rows, cols]
        curv = s0 - 2.0 * s1 + s2
        use = neighbours_ok & (curv < 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            offset = np.where(use, 0.5 * (s0 - s2) / np.where(use, curv, 1.0), 0.0)
        offset = np.clip(offset, -0.5, 0.5)
        # planes are evenly spaced in inverse depth
        step = inv_planes[1] - inv_planes[0]
        refined = inv_planes[k] + offset * step
        inv_depth = np.where(neighbours_ok, refined, inv_depth)

    with np.errstate(divide="ignore"):
        depth = 1.0 / inv_depth
    depth = np.clip(depth, planes.d_min, planes.d_max)
    ok = any_valid & (cv.valid_count[k, rows, cols] >= cfg.min_valid_sources)
    depth = np.where(ok, depth, INVALID_DEPTH)

    window = np.zeros((H, W))
    for off in (-1, 0, 1):
        kk = k + off
        inside = (kk >= 0) & (kk < D)
        window += np.where(inside, prob[np.clip(kk, 0, D - 1), rows, cols], 0.0)
    certainty = np.where(ok, np.clip(window, 0.0, 1.0), 0.0)
    return DepthMap(depth), certainty


def extract_depth(cv: CostVolume, planes: DepthPlanes, cfg: EstimatorConfig = EstimatorConfig()) -> DepthMap:
    return estimate(cv, planes, cfg)[0]


def argmax_depth(cv: CostVolume, planes: DepthPlanes) -> DepthMap:
    """Depth of the best-scoring valid plane, without interpolation."""
    valid = cv.valid_count > 0
    k = np.argmax(np.where(valid, cv.scores, -np.inf), axis=0)
    return DepthMap(np.where(valid.any(axis=0), planes.values[k], INVALID_DEPTH))

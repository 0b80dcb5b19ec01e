"""Seeded synthetic rooms and error bookkeeping for the hint trend benchmarks.

Each room has two textureless patches on the far wall and one box in front of
it. The camera sweeps laterally at about 3 m, then again at about 1.6 m, so
the far geometry is reconstructed early and revisited later from closer in.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .evaluation import upsample_nearest
from .geometry import Frame
from .pipeline import PipelineConfig, RunMode, RunResult, run_sequence
from .synth import Box, SceneSpec, mutate_scene, raycast, render_sequence
from .tsdf import TsdfConfig, TsdfVolume

BENCH_CAMERA = {"width": 192, "height": 144, "fx": 160.0, "fy": 160.0, "cx": 95.5, "cy": 71.5}
_EYES = [[0.8, 0.8, 1.3], [0.8, 2.7, 1.3], [2.4, 2.5, 1.2], [2.4, 1.0, 1.2]]
_TARGETS = [[4.0, 1.2, 1.0], [4.0, 2.3, 1.0], [4.0, 2.2, 1.0], [4.0, 1.3, 1.0]]
_STEPS = [10, 8, 10]
BOX_ID = "b0"


def benchmark_room(seed: int, patch_size: float = 0.6, camera: Optional[dict] = None) -> SceneSpec:
    rng = np.random.default_rng(seed)
    patches = []
    for k in range(2):
        y0 = 0.8 + k * 1.0 + rng.uniform(0, 0.3)
        z0 = rng.uniform(0.5, 1.2)
        patches.append(((3.9, y0, z0), (4.1, y0 + patch_size, z0 + patch_size)))
    box = Box(BOX_ID, (3.0, 0.9 + rng.uniform(0, 0.3), 0.45), (0.9, 0.9, 0.9), rng.uniform(0, 30))
    return SceneSpec(
        boxes=(box,),
        texture_seed=seed,
        textureless=tuple(patches),
        camera=dict(camera or BENCH_CAMERA),
        trajectory={"type": "waypoints", "eyes": _EYES, "targets": _TARGETS, "steps": _STEPS},
    )


def moved_box_room(spec: SceneSpec, dy: float = 1.2, dyaw: float = 20.0) -> SceneSpec:
    """The same room with the box slid sideways along the far wall and turned."""
    b = spec.box(BOX_ID)
    return mutate_scene(spec, BOX_ID, (b.center[0], b.center[1] + dy, b.center[2]), b.yaw_deg + dyaw)


def gt_volume(frames: Sequence[Frame], cfg: TsdfConfig = TsdfConfig()) -> TsdfVolume:
    """Fuse ground-truth depths, standing in for a reconstruction from an earlier visit."""
    vol = TsdfVolume(cfg)
    for f in frames:
        vol.integrate(f.gt_depth, f.pose, f.intrinsics)
    return vol


def box_surfaces(spec: SceneSpec, index: int = 0) -> range:
    """Raycast surface ids of box ``index``: six room faces come first, then six per box."""
    return range(6 + 6 * index, 12 + 6 * index)


@dataclass
class PixelErrors:
    """Pooled per-pixel absolute relative errors, split by region."""

    regions: dict = field(default_factory=dict)

    def add(self, name: str, values: np.ndarray) -> None:
        self.regions.setdefault(name, []).append(np.asarray(values, dtype=np.float64).ravel())

    def abs_rel(self, name: str) -> float:
        parts = self.regions.get(name, [])
        v = np.concatenate(parts) if parts else np.empty(0)
        return float(v.mean()) if v.size else float("nan")


def _frame_errors(result: RunResult, f: Frame):
    pred = upsample_nearest(result.depths[f.id], f.gt_depth.height, f.gt_depth.width)
    ok = pred.validity & f.gt_depth.validity
    err = np.zeros(ok.shape)
    err[ok] = np.abs(pred.values[ok] - f.gt_depth.values[ok]) / f.gt_depth.values[ok]
    return err, ok


def sequence_abs_rel(spec: SceneSpec, frames: Sequence[Frame], result: RunResult) -> tuple[float, float]:
    """Mean of per-frame AbsRel over all pixels and over textureless-patch pixels."""
    whole, flat = [], []
    for f in frames:
        if f.id not in result.depths:
            continue
        err, ok = _frame_errors(result, f)
        if ok.any():
            whole.append(err[ok].mean())
        tl = ok & raycast(spec, f.pose, f.intrinsics).textureless
        if tl.any():
            flat.append(err[tl].mean())
    return float(np.mean(whole)), float(np.mean(flat)) if flat else float("nan")


def revisit_errors(old: SceneSpec, new: SceneSpec, frames: Sequence[Frame], result: RunResult) -> PixelErrors:
    """Errors on pixels showing the moved box and on pixels where neither box position shows."""
    out = PixelErrors()
    ids = box_surfaces(new)
    for f in frames:
        if f.id not in result.depths:
            continue
        err, ok = _frame_errors(result, f)
        now = np.isin(raycast(new, f.pose, f.intrinsics).surface, ids)
        before = np.isin(raycast(old, f.pose, f.intrinsics).surface, ids)
        out.add("moved", err[ok & now])
        out.add("unchanged", err[ok & ~now & ~before])
    return out


@dataclass
class TrendRow:
    seed: int
    abs_rel: dict  # mode -> (aggregate, textureless)


def hint_trend(seeds: Sequence[int], config: Optional[PipelineConfig] = None,
               modes=(RunMode.NO_HINT, RunMode.INCREMENTAL, RunMode.OFFLINE)) -> list[TrendRow]:
    cfg = config or PipelineConfig()
    rows = []
    for seed in seeds:
        spec = benchmark_room(seed)
        frames = render_sequence(spec)
        rows.append(TrendRow(seed, {m.value: sequence_abs_rel(spec, frames, run_sequence(frames, m, cfg)) for m in modes}))
    return rows


def revisit_trial(seed: int, config: Optional[PipelineConfig] = None) -> dict:
    """NoHint vs Revisit on the moved-box room, with the prior fused from the original room."""
    cfg = config or PipelineConfig()
    old = benchmark_room(seed)
    prior = gt_volume(render_sequence(old), cfg.tsdf)
    new = moved_box_room(old)
    frames = render_sequence(new)
    base = revisit_errors(old, new, frames, run_sequence(frames, RunMode.NO_HINT, cfg))
    rev = revisit_errors(old, new, frames, run_sequence(frames, RunMode.REVISIT, cfg, prior_volume=prior))
    return {region: (base.abs_rel(region), rev.abs_rel(region)) for region in ("moved", "unchanged")}

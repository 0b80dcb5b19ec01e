"""Run modes over a posed sequence: incremental, no-hint, revisit and offline two-pass."""

from __future__ import annotations

import enum
import hashlib
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cost_volume import CostVolume, DepthPlanes, build_cost_volume, make_planes
from .estimator import EstimatorConfig, estimate, regularize
from .geometry import DepthMap, Frame, Pose, TriangleMesh, rotation_from_axis_angle
from .hint import AnalyticCombiner, HintMlp, fuse_volume
from .mesh import extract_mesh
from .render import HintImages, render_hint
from .tsdf import TsdfConfig, TsdfVolume

logger = logging.getLogger(__name__)


class RunMode(enum.Enum):
    INCREMENTAL = "incremental"
    NO_HINT = "nohint"
    REVISIT = "revisit"
    OFFLINE = "offline"


@dataclass(frozen=True)
class KeyframePolicy:
    min_translation: float = 0.1
    min_rotation: float = 5.0
    num_sources: int = 7
    min_baseline: float = 0.025

    def __post_init__(self):
        if self.min_translation <= 0 or self.min_rotation <= 0 or self.num_sources <= 0:
            raise ValueError("keyframe thresholds and source count must be positive")


@dataclass(frozen=True)
class PoseNoiseConfig:
    per_frame_sigma_t: float = 0.0
    per_frame_sigma_r: float = 0.0
    alignment_sigma_t: float = 0.0
    alignment_sigma_r: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.per_frame_sigma_t, self.per_frame_sigma_r, self.alignment_sigma_t, self.alignment_sigma_r) < 0:
            raise ValueError("pose noise sigmas must be >= 0")


# Hint weight used by the pipeline. Lower than the combiner's unit default so a
# stale hint cannot outvote clear matching evidence on moved objects.
PIPELINE_ALPHA = 0.35


@dataclass(frozen=True)
class PipelineConfig:
    tsdf: TsdfConfig = TsdfConfig()
    plane_count: int = 64
    d_min: float = 0.25
    d_max: float = 5.0
    estimator: EstimatorConfig = EstimatorConfig()
    keyframes: KeyframePolicy = KeyframePolicy()
    combiner: object = AnalyticCombiner(PIPELINE_ALPHA)
    combiner_spec: str = "analytic"
    no_confidence: bool = False
    fusion_min_certainty: float = 0.5
    cache_dir: Optional[str] = None

    def planes(self) -> DepthPlanes:
        return make_planes(self.plane_count, self.d_min, self.d_max)

    def to_dict(self) -> dict:
        return {
            "tsdf": asdict(self.tsdf),
            "plane_count": self.plane_count,
            "d_min": self.d_min,
            "d_max": self.d_max,
            "estimator": asdict(self.estimator),
            "keyframes": asdict(self.keyframes),
            "combiner": self.combiner_spec,
            "alpha": getattr(self.combiner, "alpha", None),
            "no_confidence": self.no_confidence,
            "fusion_min_certainty": self.fusion_min_certainty,
            "cache_dir": self.cache_dir,
        }

    @classmethod
    def from_dict(cls, d: dict, base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        """Overlay the keys present in ``d`` onto ``base`` (defaults if omitted)."""
        cfg = base if base is not None else cls()
        known = {"tsdf", "plane_count", "d_min", "d_max", "estimator", "keyframes", "combiner", "alpha",
                 "no_confidence", "fusion_min_certainty", "cache_dir"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        kw = {}
        if "tsdf" in d:
            kw["tsdf"] = replace(cfg.tsdf, **d["tsdf"])
        if "estimator" in d:
            kw["estimator"] = replace(cfg.estimator, **d["estimator"])
        if "keyframes" in d:
            kw["keyframes"] = replace(cfg.keyframes, **d["keyframes"])
        for k in ("plane_count", "d_min", "d_max", "no_confidence", "fusion_min_certainty", "cache_dir"):
            if k in d:
                kw[k] = d[k]
        out = replace(cfg, **kw)
        if "combiner" in d or "alpha" in d:
            out = with_combiner(out, d.get("combiner", out.combiner_spec), d.get("alpha"))
        return out


def with_combiner(cfg: PipelineConfig, spec: str, alpha: Optional[float] = None) -> PipelineConfig:
    """Resolve ``analytic`` or ``mlp:<path>`` into a combiner object."""
    if spec == "analytic":
        a = alpha if alpha is not None else getattr(cfg.combiner, "alpha", PIPELINE_ALPHA)
        return replace(cfg, combiner=AnalyticCombiner(float(a)), combiner_spec="analytic")
    if spec.startswith("mlp:"):
        return replace(cfg, combiner=HintMlp.load(spec[4:]), combiner_spec=spec)
    raise ValueError(f"combiner must be 'analytic' or 'mlp:<path>', got {spec!r}")


# --------------------------------------------------------------------------- keyframes & sources


def is_keyframe(last_kf_pose: Optional[Pose], current_pose: Pose, policy: KeyframePolicy = KeyframePolicy()) -> bool:
    if last_kf_pose is None:
        return True
    dt, dr = current_pose.relative_to(last_kf_pose)
    return dt >= policy.min_translation or dr >= policy.min_rotation


def select_sources(history: Sequence[Frame], current: Frame, k: int, min_baseline: float = 0.025) -> list[Frame]:
    """The ``k`` most recent frames of ``history`` with at least ``min_baseline`` translation."""
    out = []
    for f in reversed(history):
        if f.id == current.id:
            continue
        if current.pose.relative_to(f.pose)[0] >= min_baseline:
            out.append(f)
            if len(out) == k:
                break
    return out


def select_sources_offline(keyframes: Sequence[Frame], current: Frame, k: int, min_baseline: float = 0.025) -> list[Frame]:
    """The ``k`` keyframes anywhere in the sequence closest in pose to ``current``.

    Pose distance is translation (m) plus rotation angle (rad) scaled to 1 m per
    radian; ties go to the earlier frame.
    """
    scored = []
    for f in keyframes:
        if f.id == current.id:
            continue
        dt, dr = current.pose.relative_to(f.pose)
        if dt >= min_baseline:
            scored.append((dt + np.radians(dr), f.id, f))
    scored.sort(key=lambda x: (x[0], x[1]))
    return [f for _, _, f in scored[:k]]


# --------------------------------------------------------------------------- pose noise


def _random_perturbation(rng: np.random.Generator, sigma_t: float, sigma_r_deg: float) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = abs(rng.normal(0.0, sigma_r_deg)) if sigma_r_deg > 0 else 0.0
    t = rng.normal(0.0, sigma_t, size=3) if sigma_t > 0 else np.zeros(3)
    return Pose(rotation_from_axis_angle(axis, np.radians(angle)), t)


def inject_pose_noise(frames: Sequence[Frame], cfg: PoseNoiseConfig) -> list[Frame]:
    """Right-multiply each pose by an independent small rigid perturbation (camera frame)."""
    if cfg.per_frame_sigma_t == 0 and cfg.per_frame_sigma_r == 0:
        return list(frames)
    rng = np.random.default_rng(cfg.seed)
    return [f.with_pose(f.pose @ _random_perturbation(rng, cfg.per_frame_sigma_t, cfg.per_frame_sigma_r)) for f in frames]


def sample_alignment_perturbation(cfg: PoseNoiseConfig) -> Pose:
    """One-off rigid misalignment applied to a prior volume's frame of reference."""
    rng = np.random.default_rng([cfg.seed, 1])
    return _random_perturbation(rng, cfg.alignment_sigma_t, cfg.alignment_sigma_r)


# --------------------------------------------------------------------------- run


@dataclass
class RunResult:
    depths: dict  # frame id -> DepthMap at cost-volume resolution
    volume: TsdfVolume
    mesh: TriangleMesh
    report: dict
    passes: list = field(default_factory=list)  # offline: per-pass depth dicts


class _CostVolumeCache:
    def __init__(self, directory: Optional[str]):
        self.memory: dict = {}
        self.dir = Path(directory) if directory else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(frame: Frame, sources: Sequence[Frame]) -> str:
        h = hashlib.sha1(",".join(str(s.id) for s in sources).encode()).hexdigest()[:16]
        return f"{frame.id:06d}_{h}"

    def get(self, key: str) -> Optional[CostVolume]:
        if key in self.memory:
            return self.memory[key]
        if self.dir and (self.dir / f"{key}.npz").is_file():
            z = np.load(self.dir / f"{key}.npz")
            cv = CostVolume(z["scores"], z["valid_count"])
            self.memory[key] = cv
            return cv
        return None

    def put(self, key: str, cv: CostVolume) -> None:
        self.memory[key] = cv
        if self.dir:
            np.savez(self.dir / f"{key}.npz", scores=cv.scores, valid_count=cv.valid_count)


def estimate_keyframe(
    frame: Frame,
    sources: Sequence[Frame],
    hint_mesh: Optional[TriangleMesh],
    cfg: PipelineConfig,
    planes: DepthPlanes,
    cache: Optional[_CostVolumeCache] = None,
):
    """Depth (cost-volume resolution), certainty and stage timings for one keyframe."""
    timings = {}
    t0 = time.perf_counter()
    cv = None
    key = None
    if cache is not None:
        key = cache.key(frame, sources)
        cv = cache.get(key)
    if cv is None:
        cv = build_cost_volume(frame, sources, planes)
        if cache is not None:
            cache.put(key, cv)
    timings["cost_volume"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    _, H, W = cv.shape
    K_cv = frame.intrinsics.downsampled(4)
    if hint_mesh is None or hint_mesh.n_triangles == 0:
        hint = HintImages.missing(W, H)
    else:
        hint = render_hint(hint_mesh, frame.pose, K_cv)
    timings["hint_render"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fused = fuse_volume(cv, hint, planes, cfg.combiner, no_confidence=cfg.no_confidence)
    depth, certainty = estimate(regularize(fused, cfg.estimator), planes, cfg.estimator)
    timings["hint_fusion_and_depth"] = time.perf_counter() - t0
    return depth, certainty, hint, timings


def _fusion_depth(depth: DepthMap, certainty: np.ndarray, threshold: float) -> DepthMap:
    return DepthMap(np.where(certainty >= threshold, depth.values, -1.0))


def _select_keyframes(frames: Sequence[Frame], policy: KeyframePolicy, errors: dict) -> list[Frame]:
    kfs = []
    last = None
    for f in frames:
        if f.pose is None or f.intrinsics is None:
            errors[f.id] = "missing pose or intrinsics"
            continue
        if is_keyframe(last, f.pose, policy):
            kfs.append(f)
            last = f.pose
    return kfs


def _single_pass(
    keyframes: Sequence[Frame],
    cfg: PipelineConfig,
    planes: DepthPlanes,
    hint_source: str,
    fixed_hint: Optional[TriangleMesh] = None,
    offline_sources: bool = False,
    cache: Optional[_CostVolumeCache] = None,
):
    """One sweep over the keyframes. ``hint_source`` is 'none', 'running' or 'fixed'."""
    volume = TsdfVolume(cfg.tsdf)
    depths, per_frame, skipped = {}, [], []
    history: list[Frame] = []
    policy = cfg.keyframes
    for f in keyframes:
        t_frame = time.perf_counter()
        if offline_sources:
            sources = select_sources_offline(keyframes, f, policy.num_sources, policy.min_baseline)
        else:
            sources = select_sources(history, f, policy.num_sources, policy.min_baseline)
        history.append(f)
        if not sources:
            skipped.append(f.id)
            continue
        t0 = time.perf_counter()
        if hint_source == "running":
            hint_mesh = extract_mesh(volume) if volume.n_blocks else None
        elif hint_source == "fixed":
            hint_mesh = fixed_hint
        else:
            hint_mesh = None
        t_mesh = time.perf_counter() - t0
        depth, certainty, _, timings = estimate_keyframe(f, sources, hint_mesh, cfg, planes, cache)
        timings["hint_render"] += t_mesh
        t0 = time.perf_counter()
        volume.integrate(_fusion_depth(depth, certainty, cfg.fusion_min_certainty), f.pose, f.intrinsics.downsampled(4))
        timings["tsdf_fusion"] = time.perf_counter() - t0
        timings["total"] = time.perf_counter() - t_frame
        depths[f.id] = depth
        per_frame.append({"frame": f.id, "sources": [s.id for s in sources], **timings})
    return depths, volume, per_frame, skipped


def _timing_summary(per_frame: list) -> dict:
    if not per_frame:
        return {}
    keys = [k for k in per_frame[0] if k not in ("frame", "sources")]
    return {k: float(np.mean([p[k] for p in per_frame])) for k in keys}


def run_sequence(
    frames: Sequence[Frame],
    mode: RunMode,
    config: PipelineConfig = PipelineConfig(),
    prior_volume: Optional[TsdfVolume] = None,
    prior_alignment: Optional[Pose] = None,
) -> RunResult:
    """Estimate depth for every keyframe and fuse the estimates into a TSDF.

    ``prior_volume`` is required for :attr:`RunMode.REVISIT` and is never modified.
    ``prior_alignment`` (revisit only) rigidly moves the prior geometry before
    rendering hints, simulating relocalization error.
    """
    mode = RunMode(mode)
    planes = config.planes()
    errors: dict = {}
    keyframes = _select_keyframes(frames, config.keyframes, errors)
    report = {
        "mode": mode.value,
        "config": config.to_dict(),
        "keyframes": [f.id for f in keyframes],
        "errors": {str(k): v for k, v in errors.items()},
    }
    passes = []

    if mode in (RunMode.NO_HINT, RunMode.INCREMENTAL):
        hint_source = "none" if mode is RunMode.NO_HINT else "running"
        depths, volume, per_frame, skipped = _single_pass(keyframes, config, planes, hint_source)
        report["passes"] = [{"name": mode.value, "skipped": skipped, "per_frame": per_frame,
                             "mean_timings": _timing_summary(per_frame)}]
    elif mode is RunMode.REVISIT:
        if prior_volume is None:
            raise ValueError("revisit mode needs a prior volume")
        prior_mesh = extract_mesh(prior_volume)
        if prior_alignment is not None:
            prior_mesh = prior_mesh.transformed(prior_alignment)
        depths, volume, per_frame, skipped = _single_pass(keyframes, config, planes, "fixed", prior_mesh)
        report["passes"] = [{"name": "revisit", "skipped": skipped, "per_frame": per_frame,
                             "mean_timings": _timing_summary(per_frame)}]
    else:
        cache = _CostVolumeCache(config.cache_dir)
        d1, v1, pf1, sk1 = _single_pass(keyframes, config, planes, "none", offline_sources=True, cache=cache)
        hint_mesh = extract_mesh(v1)
        depths, volume, pf2, sk2 = _single_pass(
            keyframes, config, planes, "fixed", hint_mesh, offline_sources=True, cache=cache
        )
        passes = [d1, depths]
        report["passes"] = [
            {"name": "pass1_nohint", "skipped": sk1, "per_frame": pf1, "mean_timings": _timing_summary(pf1)},
            {"name": "pass2_hinted", "skipped": sk2, "per_frame": pf2, "mean_timings": _timing_summary(pf2)},
        ]
    mesh = extract_mesh(volume)
    return RunResult(depths, volume, mesh, report, passes)


# --------------------------------------------------------------------------- training data


def downsample_depth(depth: DepthMap, factor: int = 4) -> DepthMap:
    """Block median of valid depths; blocks with fewer than half valid pixels become invalid."""
    H, W = depth.height // factor * factor, depth.width // factor * factor
    blocks = depth.values[:H, :W].reshape(H // factor, factor, W // factor, factor).swapaxes(1, 2)
    blocks = blocks.reshape(H // factor, W // factor, -1)
    valid = blocks > 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-invalid blocks
        med = np.nanmedian(np.where(valid, blocks, np.nan), axis=2)
    ok = valid.sum(axis=2) * 2 >= factor * factor
    return DepthMap(np.where(ok, np.nan_to_num(med, nan=-1.0), -1.0))


def training_items(frames: Sequence[Frame], config: PipelineConfig = PipelineConfig()) -> list:
    """Self-generated hint training items for one sequence with GT depth.

    Hints are rendered from volumes fused with our own matching-only
    estimates: the full-sequence volume (``FULL_TSDF``) and the volume of the
    keyframes before the current one (``PARTIAL_TSDF``).
    """
    from .hint import HintMode, TrainingItem

    planes = config.planes()
    keyframes = _select_keyframes(frames, config.keyframes, {})
    policy = config.keyframes
    history, records = [], []
    partial = TsdfVolume(config.tsdf)
    for f in keyframes:
        sources = select_sources(history, f, policy.num_sources, policy.min_baseline)
        history.append(f)
        if not sources or f.gt_depth is None:
            continue
        cv = build_cost_volume(f, sources, planes)
        K_cv = f.intrinsics.downsampled(4)
        partial_mesh = extract_mesh(partial) if partial.n_blocks else None
        partial_hint = render_hint(partial_mesh, f.pose, K_cv) if partial_mesh is not None and partial_mesh.n_triangles else None
        depth, certainty = estimate(regularize(cv, config.estimator), planes, config.estimator)
        partial.integrate(_fusion_depth(depth, certainty, config.fusion_min_certainty), f.pose, K_cv)
        records.append((f, cv, partial_hint))
    full_mesh = extract_mesh(partial)
    items = []
    for f, cv, partial_hint in records:
        K_cv = f.intrinsics.downsampled(4)
        hints = {HintMode.FULL_TSDF: render_hint(full_mesh, f.pose, K_cv)}
        if partial_hint is not None:
            hints[HintMode.PARTIAL_TSDF] = partial_hint
        gt = downsample_depth(f.gt_depth, 4).values[: cv.shape[1], : cv.shape[2]]
        items.append(TrainingItem(cv, gt, hints))
    return items

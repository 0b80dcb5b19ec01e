"""
Geometry hints
==============

A mesh of what has been reconstructed so far is rendered into the current
camera. Its depth and confidence nudge the matching scores toward planes
near the rendered surface.
"""

# %%
import numpy as np

from hintmvs.benchmark import benchmark_room, gt_volume
from hintmvs.cost_volume import build_cost_volume, make_planes
from hintmvs.estimator import estimate
from hintmvs.evaluation import depth_metrics, upsample_nearest
from hintmvs.hint import AnalyticCombiner, HintMlp, combine_analytic, fuse_volume
from hintmvs.mesh import extract_mesh
from hintmvs.pipeline import select_sources
from hintmvs.render import render_hint
from hintmvs.synth import render_sequence

# %%
# The analytic combiner adds a Gaussian bump centred on the hinted depth,
# scaled by confidence. Zero confidence leaves the score untouched.
print(combine_analytic(0.2, 0.0, 1.0), combine_analytic(0.2, 0.0, 0.0), combine_analytic(0.2, 3.0, 1.0))

# %%
spec = benchmark_room(seed=3)
frames = render_sequence(spec)
planes = make_planes()
ref = frames[20]
cv = build_cost_volume(ref, select_sources(frames[:20], ref, 7), planes)
prior = extract_mesh(gt_volume(frames[:12]))
hint = render_hint(prior, ref.pose, ref.intrinsics.downsampled(4))
print("hint covers %.0f%% of the cost volume" % (100 * hint.depth.validity.mean()))

# %%
gt = ref.gt_depth
for name, combiner in (("analytic 0.35", AnalyticCombiner(0.35)), ("analytic 1.0", AnalyticCombiner(1.0)),
                       ("passthrough MLP", HintMlp.initialize(0))):
    d, _ = estimate(fuse_volume(cv, hint, planes, combiner), planes)
    print(f"{name:16s} abs_rel {depth_metrics(upsample_nearest(d, gt.height, gt.width), gt).abs_rel:.4f}")
d, _ = estimate(cv, planes)
print(f"{'no hint':16s} abs_rel {depth_metrics(upsample_nearest(d, gt.height, gt.width), gt).abs_rel:.4f}")

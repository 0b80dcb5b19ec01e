"""
Scoring meshes fairly
=====================

A predicted mesh can contain geometry that no camera ever saw. The frustum
mask counts it against accuracy. The rendered-visibility mask only keeps
space in front of observed surfaces.
"""

# %%
from hintmvs.evaluation import build_frustum_volume, build_visibility_volume, evaluate_meshes
from hintmvs.geometry import TriangleMesh
from hintmvs.synth import Box, SceneSpec, _box_mesh, render_sequence, scene_mesh

spec = SceneSpec(
    boxes=(Box("crate", (3.0, 1.2, 0.4), (0.8, 0.8, 0.8), 15.0),),
    camera={"width": 64, "height": 48, "fx": 50.0, "fy": 50.0, "cx": 31.5, "cy": 23.5},
    trajectory={"type": "waypoints", "eyes": [[0.8, 1.2, 1.3], [0.8, 1.8, 1.3]],
                "targets": [[4.0, 1.5, 1.0], [4.0, 1.8, 1.0]], "steps": [4]},
)
frames = render_sequence(spec)
gt = scene_mesh(spec)

# %%
# Hide a slab inside the crate: inside every frustum, visible from nowhere.
pred = TriangleMesh.concatenate([gt, _box_mesh(Box("slab", (3.0, 1.2, 0.4), (0.05, 0.4, 0.4), 15.0))])

for name, vis in (("legacy", build_frustum_volume(gt, frames, voxel_size=0.1)),
                  ("rendered", build_visibility_volume(gt, frames, margin=0.05, voxel_size=0.1))):
    print(f"{name:9s} {vis.visible_count:6d} voxels  {evaluate_meshes(pred, gt, vis, n_points=20000)}")

"""
Training the hint MLP
=====================

The learned combiner is a 3-32-32-1 ReLU network applied per cost-volume
cell. It starts as an exact passthrough of the matching score and is trained
with a soft-argmax log-depth loss, sampling no hint, a full-volume hint or a
partial-volume hint for each item.
"""

# %%
import numpy as np

from hintmvs.benchmark import benchmark_room
from hintmvs.hint import HintMlp, TrainConfig, train_hint_mlp
from hintmvs.pipeline import PipelineConfig, training_items
from hintmvs.synth import render_sequence

frames = render_sequence(benchmark_room(seed=0, camera={"width": 128, "height": 96, "fx": 106.7, "fy": 106.7,
                                                        "cx": 63.5, "cy": 47.5}))
items = training_items(frames)
print(len(items), "training items")

# %%
init = HintMlp.initialize(0)
x = np.array([[0.3, 0.0, 1.0], [-0.2, 1.5, 0.0]])
print("passthrough init:", init.forward(x), "== scores", x[:, 0])

# %%
result = train_hint_mlp(items, PipelineConfig().planes(), TrainConfig(steps=60, seed=0),
                        log=lambda s, tr, va: print(f"step {s:3d} train {tr:.4f}") if s % 20 == 0 else None)
print("final validation loss", result.validation_loss[-1] if result.validation_loss else None)
result.mlp.save("/tmp/hint.dtmlp")

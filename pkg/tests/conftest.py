import numpy as np
import pytest

from hintmvs.geometry import Frame, Intrinsics, Pose
from hintmvs.synth import Box, SceneSpec


def small_room(width=64, height=48, fx=50.0, n=6, seed=0, textureless=()):
    """A lightly furnished room with a short sideways camera sweep."""
    eyes = [[0.8, 1.2, 1.3], [0.8, 1.2 + 0.12 * (n - 1), 1.3]]
    return SceneSpec(
        extents=(4.0, 3.5, 2.5),
        boxes=(Box("crate", (3.0, 1.2, 0.4), (0.8, 0.8, 0.8), 15.0),),
        texture_seed=seed,
        textureless=tuple(textureless),
        camera={"width": width, "height": height, "fx": fx, "fy": fx, "cx": (width - 1) / 2, "cy": (height - 1) / 2},
        trajectory={"type": "waypoints", "eyes": eyes, "targets": [[4.0, 1.5, 1.0], [4.0, 1.8, 1.0]], "steps": [n - 1]},
    )


@pytest.fixture
def room_spec():
    return small_room()


@pytest.fixture
def cam():
    return Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


def textured_frame(K, pose, fid=0, seed=0):
    rng = np.random.default_rng(seed)
    return Frame(fid, K, pose, rng.uniform(size=(K.height, K.width)))


def random_pose(rng, t_scale=1.0):
    from hintmvs.geometry import rotation_from_axis_angle

    axis = rng.normal(size=3)
    return Pose(rotation_from_axis_angle(axis, rng.uniform(0, np.pi)), rng.normal(scale=t_scale, size=3))

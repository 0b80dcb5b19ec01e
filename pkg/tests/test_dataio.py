import json

import numpy as np
import pytest

from hintmvs.dataio import (
    SequenceFormatError,
    load_sequence,
    read_depth,
    read_image,
    write_depth,
    write_frames,
    write_sequence,
)
from hintmvs.geometry import DepthMap
from hintmvs.synth import SceneSpec


@pytest.fixture
def seq_dir(tmp_path, room_spec):
    return write_sequence(room_spec, tmp_path / "seq", depth_format="pfm")


def test_roundtrip_poses_and_pfm_depth(seq_dir, room_spec):
    from hintmvs.synth import render_sequence

    frames = load_sequence(seq_dir)
    ref = render_sequence(room_spec)
    assert [f.id for f in frames] == [f.id for f in ref]
    for a, b in zip(frames, ref):
        np.testing.assert_allclose(a.pose.matrix, b.pose.matrix, atol=1e-12)
        assert a.intrinsics == b.intrinsics
        np.testing.assert_array_equal(a.gt_depth.values, b.gt_depth.values.astype(np.float32))
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-12
    assert SceneSpec.load(seq_dir / "scene.json") == room_spec


def test_png_depth_quantization(tmp_path):
    write_depth(tmp_path / "d.png", DepthMap(np.array([[1.2345, -1.0]])))
    d = read_depth(tmp_path / "d.png").values
    assert d[0, 0] in (1.234, 1.235)
    assert d[0, 1] == -1


def test_png_sequence_roundtrip(tmp_path, room_spec):
    out = write_sequence(room_spec, tmp_path / "png")
    frames = load_sequence(out)
    assert all(np.isclose(f.gt_depth.values[f.gt_depth.validity], np.round(f.gt_depth.values[f.gt_depth.validity], 3)).all() for f in frames)


def test_subset_and_without_depth(seq_dir):
    frames = load_sequence(seq_dir, load_depth=False, frame_ids=[1, 3])
    assert [f.id for f in frames] == [1, 3]
    assert all(f.gt_depth is None for f in frames)


def test_missing_sequence_file(tmp_path):
    with pytest.raises(SequenceFormatError, match="sequence.json"):
        load_sequence(tmp_path)


def _corrupt(seq_dir, edit):
    doc = json.loads((seq_dir / "sequence.json").read_text())
    edit(doc)
    (seq_dir / "sequence.json").write_text(json.dumps(doc))


@pytest.mark.parametrize("edit, field", [
    (lambda d: d["frames"][2].pop("pose"), r"frames\[2\]\.pose"),
    (lambda d: d["frames"][1].__setitem__("intrinsics", [1, 2]), r"frames\[1\]\.intrinsics"),
    (lambda d: d["frames"][0].__setitem__("image", "nope.png"), r"frames\[0\]\.image"),
    (lambda d: d["frames"][0].__setitem__("pose", [2.0] + [0.0] * 15), r"frames\[0\]\.pose"),
])
def test_schema_errors_name_the_field(seq_dir, edit, field):
    _corrupt(seq_dir, edit)
    with pytest.raises(SequenceFormatError, match=field):
        load_sequence(seq_dir)


def test_invalid_json(seq_dir):
    (seq_dir / "sequence.json").write_text("{not json")
    with pytest.raises(SequenceFormatError, match="invalid JSON"):
        load_sequence(seq_dir)


def test_rgb_images_become_luma(tmp_path):
    from PIL import Image

    rgb = np.zeros((4, 5, 3), dtype=np.uint8)
    rgb[..., 1] = 255
    Image.fromarray(rgb).save(tmp_path / "g.png")
    np.testing.assert_allclose(read_image(tmp_path / "g.png"), 0.587)


def test_write_frames_rejects_unknown_depth_format(tmp_path):
    with pytest.raises(ValueError):
        write_frames([], tmp_path, depth_format="exr")

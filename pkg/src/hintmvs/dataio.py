"""Sequence directories: ``sequence.json`` + ``frame_%06d.png`` (+ optional depth)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import DepthMap, Frame, Intrinsics, Pose
from .render import read_pfm, write_pfm

SEQUENCE_FILE = "sequence.json"
FORMAT_NAME = "hintmvs-sequence"
FORMAT_VERSION = 1


class SequenceFormatError(ValueError):
    """Malformed or missing sequence files; the message names the file or field."""


def write_depth_png(path, depth: DepthMap) -> None:
    """16-bit PNG in millimeters, 0 = invalid."""
    mm = np.where(depth.validity, np.rint(depth.values * 1000.0), 0)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


def read_depth_png(path) -> DepthMap:
    arr = np.asarray(Image.open(path)).astype(np.float64)
    return DepthMap(np.where(arr > 0, arr / 1000.0, -1.0))


def write_depth(path, depth: DepthMap) -> None:
    path = Path(path)
    if path.suffix == ".pfm":
        write_pfm(path, depth.values)
    elif path.suffix == ".png":
        write_depth_png(path, depth)
    else:
        raise ValueError(f"unsupported depth format {path.suffix!r}")


def read_depth(path) -> DepthMap:
    path = Path(path)
    if path.suffix == ".pfm":
        return DepthMap(read_pfm(path))
    if path.suffix == ".png":
        return read_depth_png(path)
    raise ValueError(f"unsupported depth format {path.suffix!r}")


def read_image(path) -> np.ndarray:
    """Grayscale intensities in [0, 1]; RGB is converted to luma."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB", "RGBA", "I;16", "I"):
        img = img.convert("RGB")
    if img.mode in ("RGB", "RGBA"):
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        return rgb @ np.array([0.299, 0.587, 0.114])
    arr = np.asarray(img, dtype=np.float64)
    return arr / (65535.0 if img.mode.startswith("I") else 255.0)


def write_frames(frames: Sequence[Frame], out_dir, depth_format: str = "png") -> Path:
    """Write frames (and their GT depth, if any) in the sequence directory format."""
    if depth_format not in ("png", "pfm"):
        raise ValueError("depth_format must be 'png' or 'pfm'")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for f in frames:
        img_name = f"frame_{f.id:06d}.png"
        Image.fromarray(np.clip(np.rint(f.image * 255.0), 0, 255).astype(np.uint8)).save(out / img_name)
        depth_name = None
        if f.gt_depth is not None:
            depth_name = f"depth_{f.id:06d}.{depth_format}"
            write_depth(out / depth_name, f.gt_depth)
        entries.append({
            "id": int(f.id),
            "image": img_name,
            "depth": depth_name,
            "width": f.intrinsics.width,
            "height": f.intrinsics.height,
            "intrinsics": f.intrinsics.matrix.reshape(-1).tolist(),
            "pose": f.pose.matrix.reshape(-1).tolist(),
        })
    doc = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "frames": entries}
    (out / SEQUENCE_FILE).write_text(json.dumps(doc, indent=1))
    return out


def write_sequence(spec, out_dir, depth_format: str = "png") -> Path:
    """Render a :class:`~hintmvs.synth.SceneSpec` and write it as a sequence directory."""
    from .synth import render_sequence

    out = write_frames(render_sequence(spec), out_dir, depth_format)
    spec.save(out / "scene.json")
    return out


def _numbers(entry: dict, key: str, n: int, where: str) -> np.ndarray:
    if key not in entry:
        raise SequenceFormatError(f"{where}.{key}: missing")
    vals = entry[key]
    if not isinstance(vals, list) or len(vals) != n or not all(isinstance(x, (int, float)) for x in vals):
        raise SequenceFormatError(f"{where}.{key}: expected a list of {n} numbers")
    return np.asarray(vals, dtype=np.float64)


def load_sequence(seq_dir, load_depth: bool = True, frame_ids: Optional[Iterable[int]] = None) -> list[Frame]:
    seq_dir = Path(seq_dir)
    meta_path = seq_dir / SEQUENCE_FILE
    if not meta_path.is_file():
        raise SequenceFormatError(f"{meta_path}: missing sequence file")
    try:
        doc = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise SequenceFormatError(f"{meta_path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise SequenceFormatError(f"{meta_path}: frames: expected a list")
    wanted = None if frame_ids is None else set(frame_ids)
    frames = []
    for i, entry in enumerate(doc["frames"]):
        where = f"{SEQUENCE_FILE}:frames[{i}]"
        if not isinstance(entry, dict):
            raise SequenceFormatError(f"{where}: expected an object")
        for key in ("id", "image", "width", "height"):
            if key not in entry:
                raise SequenceFormatError(f"{where}.{key}: missing")
        fid = int(entry["id"])
        if wanted is not None and fid not in wanted:
            continue
        K = _numbers(entry, "intrinsics", 9, where)
        T = _numbers(entry, "pose", 16, where)
        try:
            intr = Intrinsics.from_matrix(K, int(entry["width"]), int(entry["height"]))
        except ValueError as e:
            raise SequenceFormatError(f"{where}.intrinsics: {e}") from e
        try:
            pose = Pose.from_matrix(T)
        except ValueError as e:
            raise SequenceFormatError(f"{where}.pose: {e}") from e
        img_path = seq_dir / entry["image"]
        if not img_path.is_file():
            raise SequenceFormatError(f"{where}.image: file {img_path} not found")
        depth = None
        if load_depth and entry.get("depth"):
            dpath = seq_dir / entry["depth"]
            if not dpath.is_file():
                raise SequenceFormatError(f"{where}.depth: file {dpath} not found")
            depth = read_depth(dpath)
        try:
            frames.append(Frame(fid, intr, pose, read_image(img_path), depth))
        except ValueError as e:
            raise SequenceFormatError(f"{where}: {e}") from e
    return frames

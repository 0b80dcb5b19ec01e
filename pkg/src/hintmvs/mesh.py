"""Marching-cubes extraction of the TSDF zero level set, and PLY I/O."""

from __future__ import annotations

import struct
from pathlib import Path

import numba
import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE
from .geometry import TriangleMesh
from .tsdf import BLOCK, TsdfVolume


@numba.njit(cache=True)
def _march(tsdf, weight, conf, cells, tri_table, edge_corners, corner_offsets):
    # worst case is 5 triangles per cell
    n_cells = cells.shape[0]
    verts = np.empty((n_cells * 15, 3), dtype=np.float64)
    vconf = np.empty(n_cells * 15, dtype=np.float64)
    n_out = 0
    val = np.empty(8)
    cval = np.empty(8)
    edge_pos = np.empty((12, 3))
    edge_conf = np.empty(12)
    for ci in range(n_cells):
        x = cells[ci, 0]
        y = cells[ci, 1]
        z = cells[ci, 2]
        skip = False
        case = 0
        for k in range(8):
            xx = x + corner_offsets[k, 0]
            yy = y + corner_offsets[k, 1]
            zz = z + corner_offsets[k, 2]
            if weight[xx, yy, zz] <= 0.0:
                skip = True
                break
            val[k] = tsdf[xx, yy, zz]
            cval[k] = conf[xx, yy, zz]
            if val[k] < 0.0:
                case |= 1 << k
        if skip or case == 0 or case == 255:
            continue
        for e in range(12):
            a = edge_corners[e, 0]
            b = edge_corners[e, 1]
            # interpolate from the lexicographically smaller corner so shared
            # edges produce bit-identical vertices in neighbouring cells
            if (corner_offsets[a, 0], corner_offsets[a, 1], corner_offsets[a, 2]) > (
                corner_offsets[b, 0],
                corner_offsets[b, 1],
                corner_offsets[b, 2],
            ):
                a, b = b, a
            va = val[a]
            vb = val[b]
            if (va < 0.0) == (vb < 0.0):
                continue
            t = va / (va - vb)
            for d in range(3):
                edge_pos[e, d] = (corner_offsets[a, d] + t * (corner_offsets[b, d] - corner_offsets[a, d]))
            edge_pos[e, 0] += x
            edge_pos[e, 1] += y
            edge_pos[e, 2] += z
            edge_conf[e] = cval[a] + t * (cval[b] - cval[a])
        j = 0
        while j < 16 and tri_table[case, j] >= 0:
            e = tri_table[case, j]
            verts[n_out, 0] = edge_pos[e, 0]
            verts[n_out, 1] = edge_pos[e, 1]
            verts[n_out, 2] = edge_pos[e, 2]
            vconf[n_out] = edge_conf[e]
            n_out += 1
            j += 1
    return verts[:n_out], vconf[:n_out]


def _cells_of_blocks(coords: np.ndarray, origin: np.ndarray) -> np.ndarray:
    order = np.lexsort(coords.T[::-1])
    local = np.stack(np.meshgrid(*(np.arange(BLOCK),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    base = coords[order].astype(np.int64) * BLOCK - origin
    return (base[:, None, :] + local[None]).reshape(-1, 3)


def march_dense(tsdf: np.ndarray, weight: np.ndarray, conf: np.ndarray, cells=None):
    """Run marching cubes over the given cells (all cells by default) of dense grids.

    Returns vertex positions in voxel-index units and per-vertex confidence;
    triangles are consecutive vertex triples.
    """
    tsdf = np.ascontiguousarray(tsdf, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    conf = np.ascontiguousarray(conf, dtype=np.float64)
    if cells is None:
        n = np.array(tsdf.shape) - 1
        if (n <= 0).any():
            return np.zeros((0, 3)), np.zeros(0)
        cells = np.stack(np.meshgrid(*(np.arange(k) for k in n), indexing="ij"), axis=-1).reshape(-1, 3)
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    return _march(tsdf, weight, conf, cells, TRI_TABLE, EDGE_CORNERS, CORNER_OFFSETS)


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Zero-isosurface mesh with per-vertex confidence, in world coordinates.

    Cells with any unobserved corner are skipped. Vertices are not welded.
    """
    if volume.n_blocks == 0:
        return TriangleMesh.empty()
    origin, tsdf, weight, conf = volume.dense(pad=1)
    cells = _cells_of_blocks(volume.block_coords, origin)
    verts, vconf = march_dense(tsdf, weight, conf, cells)
    if len(verts) == 0:
        return TriangleMesh.empty()
    world = (verts + origin) * volume.config.voxel_size
    tris = np.arange(len(verts), dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(world, tris, np.clip(vconf, 0.0, 1.0))


def weld_vertices(mesh: TriangleMesh) -> TriangleMesh:
    """Merge bit-identical vertex positions (confidence of the first occurrence is kept)."""
    if len(mesh.vertices) == 0:
        return mesh
    uniq, first, inverse = np.unique(mesh.vertices, axis=0, return_index=True, return_inverse=True)
    conf = None if mesh.vertex_confidence is None else mesh.vertex_confidence[first]
    return TriangleMesh(uniq, inverse.reshape(-1)[mesh.triangles], conf)


# --------------------------------------------------------------------------- PLY


def write_ply(path, mesh: TriangleMesh) -> None:
    """Binary little-endian PLY with a float ``confidence`` vertex property."""
    conf = mesh.vertex_confidence if mesh.vertex_confidence is not None else np.ones(len(mesh.vertices))
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\nproperty float confidence\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    vdata = np.empty(len(mesh.vertices), dtype=[("p", "<f4", 3), ("c", "<f4")])
    vdata["p"] = mesh.vertices
    vdata["c"] = conf
    fdata = np.empty(len(mesh.triangles), dtype=[("n", "u1"), ("i", "<i4", 3)])
    fdata["n"] = 3
    fdata["i"] = mesh.triangles
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vdata.tobytes())
        f.write(fdata.tobytes())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def read_ply(path) -> TriangleMesh:
    """Read a binary little-endian triangle PLY (as written by :func:`write_ply`)."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: only binary_little_endian PLY is supported")
    elements = []
    for ln in lines:
        parts = ln.split()
        if parts[:1] == ["element"]:
            elements.append((parts[1], int(parts[2]), []))
        elif parts[:1] == ["property"]:
            elements[-1][2].append(parts[1:])
    off = 0
    verts = np.zeros((0, 3))
    conf = None
    tris = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if any(p[0] == "list" for p in props):
            if len(props) != 1:
                raise ValueError(f"{path}: mixed list/scalar face properties unsupported")
            _, ctype, itype, _ = props[0]
            dt = np.dtype([("n", _PLY_TYPES[ctype]), ("i", _PLY_TYPES[itype], 3)])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=off)
            if count and (arr["n"] != 3).any():
                raise ValueError(f"{path}: only triangle faces are supported")
            off += dt.itemsize * count
            if name == "face":
                tris = arr["i"].astype(np.int64)
        else:
            dt = np.dtype([(p[1], _PLY_TYPES[p[0]]) for p in props])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                if "confidence" in dt.names:
                    conf = arr["confidence"].astype(np.float64)
    return TriangleMesh(verts, tris, conf)

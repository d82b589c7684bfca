"""Labeled marching-cubes mesh extraction from the TSDF store."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mc_tables import CORNERS, EDGE_CORNERS, TRIANGLES
from .semantics import LabelSet, informative
from .voxel_store import LOCAL_OFFSETS, VoxelStore, unique_rows, voxel_to_block

UNLABELED = -1
UNLABELED_COLOR = (128, 128, 128)
_KEY_BITS = 20
_KEY_OFFSET = 1 << (_KEY_BITS - 1)


@dataclass
class LabeledMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    vertex_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    vertex_normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    vertex_colors: np.ndarray | None = None

    def __len__(self):
        return len(self.vertices)

    def colorize(self, labels: LabelSet) -> LabeledMesh:
        palette = np.array(list(labels.colors) + [UNLABELED_COLOR], dtype=np.uint8)
        lab = np.where(self.vertex_labels < 0, len(labels.colors), self.vertex_labels)
        self.vertex_colors = palette[lab]
        return self


def edge_keys(lo_voxel: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Pack (lower endpoint voxel, axis) into one int64 per edge."""
    v = lo_voxel + _KEY_OFFSET
    return ((v[:, 0] << (2 * _KEY_BITS + 2)) | (v[:, 1] << (_KEY_BITS + 2)) | (v[:, 2] << 2) | axis).astype(
        np.int64
    )


@dataclass
class _Piece:
    """Triangles owned by a set of blocks, with vertices keyed by edge."""

    tri_keys: np.ndarray  # (T, 3) edge keys
    owner: np.ndarray  # (T,) index into the block list it was built from
    vkeys: np.ndarray  # (V,) sorted unique keys
    vpos: np.ndarray
    vprobs: np.ndarray  # (V, K) interpolated distribution
    vlabeled: np.ndarray  # (V,) bool


def _cells(store: VoxelStore, block_coords: np.ndarray, min_weight: float) -> _Piece:
    k = store.config.num_labels
    nu = store.config.voxel_size
    empty = _Piece(
        np.zeros((0, 3), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
        np.zeros((0, 3)), np.zeros((0, k), np.float32), np.zeros(0, bool),
    )
    if not len(block_coords):
        return empty
    slots = store.slots_for_blocks(block_coords)
    ok = slots >= 0
    block_coords, slots, owner_ids = block_coords[ok], slots[ok], np.flatnonzero(ok)
    w0 = store._weight[slots]
    bi, lin = np.nonzero(w0 >= min_weight)
    if not bi.size:
        return empty
    base = block_coords[bi] * 8 + LOCAL_OFFSETS[lin]
    corner_vox = base[:, None, :] + CORNERS[None, :, :]
    dist, weight, present = store.gather(corner_vox.reshape(-1, 3))
    dist = dist.reshape(-1, 8)
    weight = weight.reshape(-1, 8)
    valid = np.all(present.reshape(-1, 8) & (weight >= min_weight), axis=1)
    case = ((dist < 0) << np.arange(8)).sum(axis=1)
    valid &= (case != 0) & (case != 255)
    if not valid.any():
        return empty
    base, dist, case, bi = base[valid], dist[valid], case[valid], bi[valid]

    tri = TRIANGLES[case]  # (C, 16)
    ci, ti = np.nonzero(tri >= 0)
    edges = tri[ci, ti]
    lo_corner = EDGE_CORNERS[edges, 0]
    hi_corner = EDGE_CORNERS[edges, 1]
    lo_vox = base[ci] + CORNERS[lo_corner]
    axis = np.argmax(CORNERS[hi_corner] - CORNERS[lo_corner], axis=1)
    keys = edge_keys(lo_vox, axis)
    d_lo = dist[ci, lo_corner].astype(np.float64)
    d_hi = dist[ci, hi_corner].astype(np.float64)

    tri_keys = keys.reshape(-1, 3)
    owner = owner_ids[bi[ci.reshape(-1, 3)[:, 0]]]

    vkeys, first = np.unique(keys, return_index=True)
    lo_v = lo_vox[first]
    ax = axis[first]
    dl, dh = d_lo[first], d_hi[first]
    t = dl / (dl - dh)
    pos = lo_v * nu
    pos[np.arange(len(pos)), ax] += t * nu

    # semantic interpolation along the edge
    hi_v = lo_v.copy()
    hi_v[np.arange(len(hi_v)), ax] += 1
    probs_lo, has_lo, inf_lo = _voxel_probs(store, lo_v)
    probs_hi, has_hi, inf_hi = _voxel_probs(store, hi_v)
    vprobs = (1.0 - t)[:, None] * probs_lo + t[:, None] * probs_hi
    vlabeled = has_lo & has_hi & (inf_lo | inf_hi)
    return _Piece(tri_keys, owner, vkeys, pos, vprobs.astype(np.float32), vlabeled)


def _voxel_probs(store: VoxelStore, v: np.ndarray):
    bc, lin = voxel_to_block(v)
    slots = store.slots_for_blocks(bc)
    probs, has = store.semantic_probs(np.where(slots >= 0, slots, 0), lin)
    has &= slots >= 0
    return probs.astype(np.float64), has, informative(probs)


def _assemble(pieces: list[_Piece], num_labels: int) -> LabeledMesh:
    pieces = [p for p in pieces if len(p.tri_keys)]
    if not pieces:
        return LabeledMesh()
    all_keys = np.concatenate([p.vkeys for p in pieces])
    vkeys, first = np.unique(all_keys, return_index=True)
    pos = np.concatenate([p.vpos for p in pieces])[first]
    probs = np.concatenate([p.vprobs for p in pieces])[first]
    labeled = np.concatenate([p.vlabeled for p in pieces])[first]
    tri_keys = np.concatenate([p.tri_keys for p in pieces])
    # table winding faces the negative side; reverse so faces are CCW from outside
    faces = np.searchsorted(vkeys, tri_keys)[:, ::-1].copy()
    labels = np.where(labeled, np.argmax(probs, axis=1), UNLABELED)

    # area-weighted face normals
    a, b, c = pos[faces[:, 0]], pos[faces[:, 1]], pos[faces[:, 2]]
    fn = np.cross(b - a, c - a)
    vn = np.zeros_like(pos)
    for j in range(3):
        np.add.at(vn, faces[:, j], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    vn = np.where(norm > 0, vn / np.where(norm > 0, norm, 1.0), np.array([0.0, 0.0, 1.0]))
    return LabeledMesh(pos, faces, labels.astype(np.int64), vn)


def extract_mesh(store: VoxelStore, min_weight: float = 1e-4) -> LabeledMesh:
    """Marching cubes over every cell whose eight corners have weight >= min_weight.

    A cell belongs to the block of its minimum corner; vertices are keyed by
    the grid edge they lie on, so cells in neighbouring blocks share them.
    """
    piece = _cells(store, store.block_coords(), min_weight)
    return _assemble([piece], store.config.num_labels)


def extract_vertex_cloud(mesh: LabeledMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unique vertex positions with their labels (first occurrence wins)."""
    if not len(mesh.vertices):
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    _, idx = np.unique(mesh.vertices, axis=0, return_index=True)
    idx = np.sort(idx)
    return mesh.vertices[idx], mesh.vertex_labels[idx]


_NEIGHBORS = np.stack(
    np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), axis=-1
).reshape(-1, 3)


class MeshCache:
    """Per-block mesh pieces, refreshed incrementally from the store's dirty set."""

    def __init__(self, store: VoxelStore, min_weight: float = 1e-4):
        self.store = store
        self.min_weight = min_weight
        self.pieces: dict[tuple[int, int, int], _Piece] = {}

    def update(self, dirty_blocks=None) -> LabeledMesh:
        """Re-mesh dirty blocks plus their 26 neighbours; returns the delta mesh.

        A change to a block alters cells owned by lower neighbours (their upper
        corners read from it), so the full 3x3x3 neighbourhood is refreshed.
        """
        if dirty_blocks is None:
            dirty_blocks = self.store.dirty
            self.store.dirty = set()
        if not dirty_blocks:
            return LabeledMesh()
        dirty = np.asarray(sorted(dirty_blocks), dtype=np.int64).reshape(-1, 3)
        cand = unique_rows((dirty[:, None, :] + _NEIGHBORS[None]).reshape(-1, 3))
        cand = cand[self.store.slots_for_blocks(cand) >= 0]
        piece = _cells(self.store, cand, self.min_weight)
        pieces = []
        for i, bc in enumerate(map(tuple, cand.tolist())):
            sel = piece.owner == i
            sub = _subset(piece, sel)
            self.pieces[bc] = sub
            pieces.append(sub)
        self.touched_blocks = cand
        return _assemble(pieces, self.store.config.num_labels)

    def mesh(self) -> LabeledMesh:
        keys = sorted(self.pieces)
        return _assemble([self.pieces[k] for k in keys], self.store.config.num_labels)


def _subset(piece: _Piece, tri_sel: np.ndarray) -> _Piece:
    tk = piece.tri_keys[tri_sel]
    used = np.unique(tk)
    idx = np.searchsorted(piece.vkeys, used)
    return _Piece(tk, piece.owner[tri_sel], used, piece.vpos[idx], piece.vprobs[idx], piece.vlabeled[idx])


def incremental_remesh(store: VoxelStore, dirty_blocks, cache: MeshCache | None = None) -> LabeledMesh:
    cache = cache or MeshCache(store)
    return cache.update(set(map(tuple, np.asarray(list(dirty_blocks), dtype=np.int64).reshape(-1, 3).tolist())))


# -- PLY ----------------------------------------------------------------------------------

_PLY_VERTEX = np.dtype(
    [
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
        ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
        ("red", "u1"), ("green", "u1"), ("blue", "u1"),
        ("label", "u1"),
    ]
)
_PLY_FACE = np.dtype([("n", "u1"), ("v", "<i4", (3,))])


def write_ply(path, mesh: LabeledMesh, labels: LabelSet | None = None):
    """Binary little-endian PLY; unlabeled vertices get label 255 and gray."""
    if labels is not None:
        mesh.colorize(labels)
    n = len(mesh.vertices)
    rec = np.zeros(n, dtype=_PLY_VERTEX)
    # point clouds may come without normals; those are written as zeros
    normals = mesh.vertex_normals if len(mesh.vertex_normals) == n else np.zeros((n, 3))
    for i, c in enumerate("xyz"):
        rec[c] = mesh.vertices[:, i]
        rec["n" + c] = normals[:, i]
    colors = mesh.vertex_colors
    if colors is None:
        colors = np.tile(np.array(UNLABELED_COLOR, dtype=np.uint8), (n, 1))
    rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    rec["label"] = np.where(mesh.vertex_labels < 0, 255, mesh.vertex_labels)
    faces = np.zeros(len(mesh.faces), dtype=_PLY_FACE)
    faces["n"] = 3
    faces["v"] = mesh.faces
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property uchar label\n"
        f"element face {len(faces)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())
        f.write(faces.tobytes())


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2", "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4",
}


def read_ply(path) -> LabeledMesh:
    """Read binary little-endian PLY vertices (and triangle faces when present)."""
    data = open(path, "rb").read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    elements, current = [], None
    for line in header:
        parts = line.split()
        if parts[:1] == ["element"]:
            current = [parts[1], int(parts[2]), []]
            elements.append(current)
        elif parts[:1] == ["property"] and current is not None:
            if parts[1] == "list":
                current[2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            else:
                current[2].append((parts[2], _PLY_TYPES[parts[1]]))
    off = end
    verts = faces = None
    for name, count, props in elements:
        if any(isinstance(t, tuple) for _, t in props):
            (_, (_, ct, it)), = props
            dt = np.dtype([("n", ct), ("v", it, (3,))])
            arr = np.frombuffer(data, dt, count, off)
            if count and np.any(arr["n"] != 3):
                raise ValueError(f"{path}: only triangle faces are supported")
            off += dt.itemsize * count
        else:
            dt = np.dtype(props)
            arr = np.frombuffer(data, dt, count, off)
            off += dt.itemsize * count
        if name == "vertex":
            verts = arr
        elif name == "face":
            faces = arr
    if verts is None:
        raise ValueError(f"{path}: no vertex element")
    names = verts.dtype.names
    pos = np.stack([verts[c] for c in "xyz"], axis=1).astype(np.float64)
    normals = (
        np.stack([verts[c] for c in ("nx", "ny", "nz")], axis=1).astype(np.float64)
        if "nx" in names
        else np.zeros_like(pos)
    )
    labels = verts["label"].astype(np.int64) if "label" in names else np.full(len(pos), UNLABELED)
    labels[labels == 255] = UNLABELED
    colors = (
        np.stack([verts[c] for c in ("red", "green", "blue")], axis=1) if "red" in names else None
    )
    f = faces["v"].astype(np.int64) if faces is not None else np.zeros((0, 3), np.int64)
    return LabeledMesh(pos, f, labels, normals, colors)


__all__ = [
    "LabeledMesh",
    "MeshCache",
    "extract_mesh",
    "extract_vertex_cloud",
    "incremental_remesh",
    "read_ply",
    "write_ply",
    "UNLABELED",
]

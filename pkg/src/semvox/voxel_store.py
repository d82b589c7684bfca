"""Two-level sparse voxel container.

Blocks of 8x8x8 voxels are addressed by integer block coordinates through a
hash table (a Python dict). Voxel data lives in pooled numpy arrays indexed by
block slot, so the integrators can gather and scatter whole frames at once.

Local voxel order inside a block is x-fastest: ``index = x + 8*y + 64*z``.
Negative coordinates use floor division and a nonnegative remainder.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BLOCK_SIZE = 8
VOXELS_PER_BLOCK = BLOCK_SIZE**3
SNAPSHOT_MAGIC = b"SVOX1"

_LOCAL = np.stack(
    np.meshgrid(np.arange(8), np.arange(8), np.arange(8), indexing="ij"), axis=-1
).reshape(-1, 3)
# x-fastest ordering of local offsets: row i holds (x, y, z) of local index i
LOCAL_OFFSETS = _LOCAL[np.lexsort((_LOCAL[:, 0], _LOCAL[:, 1], _LOCAL[:, 2]))]


class CapacityExceededError(RuntimeError):
    """Raised when allocating a block would exceed ``MapConfig.max_blocks``."""


@dataclass(frozen=True)
class MapConfig:
    voxel_size: float = 0.25
    truncation: float | None = None
    num_labels: int = 8
    max_blocks: int = 2**20

    def __post_init__(self):
        if self.truncation is None:
            object.__setattr__(self, "truncation", 5.0 * self.voxel_size)
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not self.truncation > 0 or self.truncation < self.voxel_size:
            raise ValueError("truncation must be >= voxel_size > 0")
        if not 1 <= self.num_labels <= 64:
            raise ValueError("num_labels must be in [1, 64]")
        if self.max_blocks < 1:
            raise ValueError("max_blocks must be >= 1")

    @property
    def block_extent(self) -> float:
        return self.voxel_size * BLOCK_SIZE


def world_to_voxel(p, voxel_size: float) -> np.ndarray:
    """Nearest voxel index of world point(s) ``p``; exact halves round up."""
    return np.floor(np.asarray(p, dtype=np.float64) / voxel_size + 0.5).astype(np.int64)


def voxel_to_world(v, voxel_size: float) -> np.ndarray:
    return np.asarray(v, dtype=np.float64) * voxel_size


def unique_rows(a: np.ndarray, return_inverse: bool = False):
    """``np.unique(a, axis=0)`` for (N, 3) int coordinates in [-2**20, 2**20).

    Rows are packed into one int64 key each, which sorts much faster.
    """
    a = np.asarray(a, dtype=np.int64).reshape(-1, 3)
    off = a + (1 << 20)
    if off.size and (off.min() < 0 or off.max() >= (1 << 21)):
        return np.unique(a, axis=0, return_inverse=return_inverse)
    key = (off[:, 0] << 42) | (off[:, 1] << 21) | off[:, 2]
    if return_inverse:
        ukey, inv = np.unique(key, return_inverse=True)
    else:
        ukey = np.unique(key)
    mask = (1 << 21) - 1
    rows = np.stack([ukey >> 42, (ukey >> 21) & mask, ukey & mask], axis=1) - (1 << 20)
    return (rows, inv.reshape(-1)) if return_inverse else rows


def voxel_to_block(v) -> tuple[np.ndarray, np.ndarray]:
    """Split global voxel indices into (block coords, local linear index)."""
    v = np.asarray(v, dtype=np.int64)
    bc = v >> 3  # arithmetic shift == floor division by BLOCK_SIZE
    loc = v & 7
    lin = loc[..., 0] | (loc[..., 1] << 3) | (loc[..., 2] << 6)
    return bc, lin


class VoxelBlock:
    """Handle to one allocated block; the arrays are views into the store pools."""

    __slots__ = ("store", "block_coord", "slot")

    def __init__(self, store: VoxelStore, block_coord: tuple[int, int, int], slot: int):
        self.store = store
        self.block_coord = block_coord
        self.slot = slot

    @property
    def distance(self) -> np.ndarray:
        return self.store._dist[self.slot]

    @property
    def weight(self) -> np.ndarray:
        return self.store._weight[self.slot]

    @property
    def gradient(self) -> np.ndarray:
        return self.store._grad[self.slot]

    @property
    def probs(self) -> np.ndarray | None:
        s = self.store._sem_slot[self.slot]
        return None if s < 0 else self.store._probs[s]

    def voxel_coords(self) -> np.ndarray:
        return np.asarray(self.block_coord, dtype=np.int64) * BLOCK_SIZE + LOCAL_OFFSETS

    def __repr__(self):
        return f"VoxelBlock({self.block_coord}, slot={self.slot})"


@dataclass
class VoxelView:
    distance: float
    weight: float
    gradient: np.ndarray
    probs: np.ndarray


class VoxelStore:
    """Sparse TSDF + semantic voxel map.

    Pools grow by doubling; ``_block_index`` is a dense slot lookup grid over the
    bounding box of allocated blocks, kept in sync with the dict so vectorized
    lookups avoid per-element hashing.
    """

    def __init__(self, config: MapConfig):
        self.config = config
        self._blocks: dict[tuple[int, int, int], int] = {}
        self._coords = np.zeros((0, 3), dtype=np.int64)
        self._lock = threading.Lock()
        self._dist = np.zeros((0, VOXELS_PER_BLOCK), dtype=np.float32)
        self._weight = np.zeros((0, VOXELS_PER_BLOCK), dtype=np.float32)
        self._grad = np.zeros((0, VOXELS_PER_BLOCK, 3), dtype=np.float32)
        self._sem_slot = np.zeros(0, dtype=np.int64)
        self._probs = np.zeros((0, VOXELS_PER_BLOCK, config.num_labels), dtype=np.float32)
        self._num_sem = 0
        self._grid = np.full((0, 0, 0), -1, dtype=np.int32)
        self._grid_min = np.zeros(3, dtype=np.int64)
        self.dirty: set[tuple[int, int, int]] = set()

    # -- allocation -----------------------------------------------------------------

    def __len__(self):
        return len(self._blocks)

    def __contains__(self, bc):
        return tuple(int(c) for c in bc) in self._blocks

    def block_coords(self) -> np.ndarray:
        return self._coords[: len(self._blocks)].copy()

    def get_block(self, bc) -> VoxelBlock | None:
        key = tuple(int(c) for c in bc)
        slot = self._blocks.get(key)
        return None if slot is None else VoxelBlock(self, key, slot)

    def get_or_allocate_block(self, bc) -> VoxelBlock:
        key = tuple(int(c) for c in bc)
        slot = self._blocks.get(key)
        if slot is not None:
            return VoxelBlock(self, key, slot)
        with self._lock:
            slot = self._blocks.get(key)
            if slot is None:
                slot = self._allocate(key)
        return VoxelBlock(self, key, slot)

    def allocate_blocks(self, bcs: np.ndarray) -> tuple[np.ndarray, int]:
        """Vectorized get-or-allocate. Returns (slots, number of new blocks)."""
        bcs = np.asarray(bcs, dtype=np.int64).reshape(-1, 3)
        slots = self.slots_for_blocks(bcs)
        missing = np.flatnonzero(slots < 0)
        new = 0
        if missing.size:
            with self._lock:
                for i in missing:
                    key = (int(bcs[i, 0]), int(bcs[i, 1]), int(bcs[i, 2]))
                    slot = self._blocks.get(key)
                    if slot is None:
                        slot = self._allocate(key)
                        new += 1
                    slots[i] = slot
        return slots, new

    def _allocate(self, key: tuple[int, int, int]) -> int:
        n = len(self._blocks)
        if n >= self.config.max_blocks:
            raise CapacityExceededError(
                f"block budget of {self.config.max_blocks} exhausted; raise max_blocks "
                "or use a coarser voxel size"
            )
        if n >= self._dist.shape[0]:
            self._grow(max(64, 2 * self._dist.shape[0]))
        self._dist[n] = 0.0
        self._weight[n] = 0.0
        self._grad[n] = 0.0
        self._sem_slot[n] = -1
        self._coords[n] = key
        self._blocks[key] = n
        self._grid_insert(np.asarray(key, dtype=np.int64), n)
        return n

    def _grow(self, cap: int):
        def grow(a, fill=0):
            out = np.full((cap,) + a.shape[1:], fill, dtype=a.dtype)
            out[: a.shape[0]] = a
            return out

        self._dist = grow(self._dist)
        self._weight = grow(self._weight)
        self._grad = grow(self._grad)
        self._sem_slot = grow(self._sem_slot, -1)
        self._coords = grow(self._coords)

    def ensure_semantic(self, slots: np.ndarray) -> np.ndarray:
        """Allocate the semantic layer for the given block slots; returns sem slots."""
        slots = np.asarray(slots, dtype=np.int64)
        need = np.unique(slots[self._sem_slot[slots] < 0])
        if need.size:
            k = self.config.num_labels
            total = self._num_sem + need.size
            if total > self._probs.shape[0]:
                cap = max(total, 2 * self._probs.shape[0], 16)
                out = np.empty((cap, VOXELS_PER_BLOCK, k), dtype=np.float32)
                out[: self._num_sem] = self._probs[: self._num_sem]
                self._probs = out
            self._probs[self._num_sem : total] = np.float32(1.0 / k)
            self._sem_slot[need] = np.arange(self._num_sem, total)
            self._num_sem = total
        return self._sem_slot[slots]

    # -- dense slot index -----------------------------------------------------------

    def _grid_insert(self, bc: np.ndarray, slot: int):
        g = self._grid
        lo = self._grid_min
        hi = lo + np.asarray(g.shape)
        if g.size == 0 or np.any(bc < lo) or np.any(bc >= hi):
            if g.size == 0:
                new_lo, new_hi = bc - 4, bc + 5
            else:
                span = hi - lo
                new_lo = np.where(bc < lo, np.minimum(bc, lo - span // 2) - 2, lo)
                new_hi = np.where(bc >= hi, np.maximum(bc + 1, hi + span // 2) + 2, hi)
            ng = np.full(tuple(new_hi - new_lo), -1, dtype=np.int32)
            if g.size:
                o = lo - new_lo
                ng[o[0] : o[0] + g.shape[0], o[1] : o[1] + g.shape[1], o[2] : o[2] + g.shape[2]] = g
            self._grid, self._grid_min = ng, new_lo
        i = bc - self._grid_min
        self._grid[i[0], i[1], i[2]] = slot

    def slots_for_blocks(self, bcs: np.ndarray) -> np.ndarray:
        """Slot per block coordinate row, -1 when unallocated. Never allocates."""
        bcs = np.asarray(bcs, dtype=np.int64)
        out = np.full(bcs.shape[:-1], -1, dtype=np.int64)
        if self._grid.size == 0:
            return out
        i = bcs - self._grid_min
        s0, s1, s2 = self._grid.shape
        i0, i1, i2 = i[..., 0], i[..., 1], i[..., 2]
        # unsigned compare folds the lower and upper bound checks
        inside = (i0.view(np.uint64) < s0) & (i1.view(np.uint64) < s1) & (i2.view(np.uint64) < s2)
        flat = (i0 * s1 + i1) * s2 + i2
        out[inside] = self._grid.reshape(-1)[flat[inside]]
        return out

    def flat_index(self, v: np.ndarray) -> np.ndarray:
        """Flat pool index (slot * 512 + local) per voxel, -1 when unallocated."""
        bc, lin = voxel_to_block(v)
        slots = self.slots_for_blocks(bc)
        return np.where(slots >= 0, slots * VOXELS_PER_BLOCK + lin, -1)

    # -- voxel access ---------------------------------------------------------------

    def lookup_voxel(self, v) -> VoxelView | None:
        bc, lin = voxel_to_block(np.asarray(v, dtype=np.int64))
        slot = self._blocks.get(tuple(int(c) for c in bc))
        if slot is None:
            return None
        s = self._sem_slot[slot]
        k = self.config.num_labels
        probs = np.full(k, 1.0 / k, dtype=np.float32) if s < 0 else self._probs[s, lin].copy()
        return VoxelView(
            float(self._dist[slot, lin]),
            float(self._weight[slot, lin]),
            self._grad[slot, lin].copy(),
            probs,
        )

    def gather(self, v: np.ndarray):
        """Vectorized read: (distance, weight, present) for voxel index rows ``v``."""
        flat = self.flat_index(v)
        present = flat >= 0
        f = np.where(present, flat, 0)
        dist = self._dist.reshape(-1)[f] if len(self) else np.zeros(f.shape, np.float32)
        weight = self._weight.reshape(-1)[f] if len(self) else np.zeros(f.shape, np.float32)
        weight = np.where(present, weight, 0.0)
        return dist, weight, present

    @property
    def flat_distance(self) -> np.ndarray:
        return self._dist.reshape(-1)

    @property
    def flat_weight(self) -> np.ndarray:
        return self._weight.reshape(-1)

    @property
    def flat_gradient(self) -> np.ndarray:
        return self._grad.reshape(-1, 3)

    def semantic_probs(self, slots: np.ndarray, lin: np.ndarray):
        """Return (probs rows, has_layer) for voxels given by block slot + local index."""
        k = self.config.num_labels
        s = self._sem_slot[slots]
        has = s >= 0
        out = np.full(slots.shape + (k,), 1.0 / k, dtype=np.float32)
        if has.any():
            out[has] = self._probs[s[has], lin[has]]
        return out, has

    def stats(self) -> tuple[int, int, int]:
        n = len(self._blocks)
        observed = int(np.count_nonzero(self._weight[:n] > 0))
        per_block = VOXELS_PER_BLOCK * (4 + 4 + 12) + 3 * 8 + 8
        mem = n * per_block + self._num_sem * VOXELS_PER_BLOCK * self.config.num_labels * 4
        return n, observed, mem

    # -- serialization --------------------------------------------------------------

    def save(self, path):
        cfg = self.config
        n = len(self._blocks)
        with open(path, "wb") as f:
            f.write(SNAPSHOT_MAGIC)
            f.write(struct.pack("<ffII", cfg.voxel_size, cfg.truncation, cfg.num_labels, n))
            tsdf_dtype = np.dtype([("d", "<f4"), ("w", "<f4"), ("g", "<f4", (3,))])
            for slot in range(n):
                f.write(self._coords[slot].astype("<i4").tobytes())
                rec = np.empty(VOXELS_PER_BLOCK, dtype=tsdf_dtype)
                rec["d"] = self._dist[slot]
                rec["w"] = self._weight[slot]
                rec["g"] = self._grad[slot]
                f.write(rec.tobytes())
                s = self._sem_slot[slot]
                f.write(struct.pack("<B", 1 if s >= 0 else 0))
                if s >= 0:
                    f.write(self._probs[s].astype("<f4").tobytes())

    @classmethod
    def load(cls, path, max_blocks: int = 2**20) -> VoxelStore:
        data = Path(path).read_bytes()
        if data[:5] != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a map snapshot")
        # header floats are float32; keep them exact as stored
        nu, tau, k, n = struct.unpack_from("<ffII", data, 5)
        cfg = MapConfig(float(np.float32(nu)), float(np.float32(tau)), k, max(max_blocks, n))
        store = cls(cfg)
        off = 5 + 16
        tsdf_dtype = np.dtype([("d", "<f4"), ("w", "<f4"), ("g", "<f4", (3,))])
        for _ in range(n):
            bc = np.frombuffer(data, "<i4", 3, off).astype(np.int64)
            off += 12
            rec = np.frombuffer(data, tsdf_dtype, VOXELS_PER_BLOCK, off)
            off += tsdf_dtype.itemsize * VOXELS_PER_BLOCK
            blk = store.get_or_allocate_block(bc)
            blk.distance[:] = rec["d"]
            blk.weight[:] = rec["w"]
            blk.gradient[:] = rec["g"]
            (flag,) = struct.unpack_from("<B", data, off)
            off += 1
            if flag:
                s = store.ensure_semantic(np.array([blk.slot]))[0]
                store._probs[s] = np.frombuffer(data, "<f4", VOXELS_PER_BLOCK * k, off).reshape(-1, k)
                off += 4 * VOXELS_PER_BLOCK * k
        store.dirty.clear()
        return store

"""Vertex traversability scoring, occupancy projection and grid A* planning."""

from __future__ import annotations

import heapq
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .mesh import LabeledMesh

FREE, OCCUPIED, UNKNOWN = 0, 1, 2
SQRT2 = math.sqrt(2.0)


class PlanningError(RuntimeError):
    pass


class InvalidEndpointError(PlanningError):
    pass


class InfeasiblePathError(PlanningError):
    pass


@dataclass(frozen=True)
class TraversabilityConfig:
    radius: float = 0.25
    max_height_diff: float = 0.6
    max_steepness: float = 20.0  # degrees
    max_roughness: float = 30.0  # degrees
    traversable_labels: frozenset[int] | None = None  # None: every labeled class
    grid_resolution: float = 0.25
    inflation_radius: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if min(self.max_height_diff, self.max_steepness, self.max_roughness) <= 0:
            raise ValueError("thresholds must be positive")
        if not self.grid_resolution > 0:
            raise ValueError("grid_resolution must be positive")
        if self.inflation_radius < 0:
            raise ValueError("inflation_radius must be nonnegative")


@dataclass
class TraversabilityScores:
    height_diff: np.ndarray
    steepness: np.ndarray
    roughness: np.ndarray
    traversable: np.ndarray


def _neighbor_pairs(points: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """All ordered pairs (i, j) with |p_i - p_j| <= radius, self pairs included."""
    tree = cKDTree(points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    n = len(points)
    self_idx = np.arange(n)
    i = np.concatenate([self_idx, pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([self_idx, pairs[:, 1], pairs[:, 0]])
    return i, j


def score_vertices(mesh: LabeledMesh, cfg: TraversabilityConfig | None = None) -> TraversabilityScores:
    """Height difference, steepness and roughness per vertex over a ball of radius r.

    Height difference is the elevation range inside the ball, steepness the
    angle between the vertex normal and world up, roughness the angle between
    the vertex normal and the mean normal of the ball. A vertex is traversable
    when all three stay within their thresholds and its label is allowed.
    """
    cfg = cfg or TraversabilityConfig()
    pts = np.asarray(mesh.vertices, dtype=np.float64)
    n = len(pts)
    if n == 0:
        e = np.zeros(0)
        return TraversabilityScores(e, e, e, np.zeros(0, dtype=bool))
    normals = np.asarray(mesh.vertex_normals, dtype=np.float64)
    i, j = _neighbor_pairs(pts, cfg.radius)

    z = pts[:, 2]
    zmax = np.full(n, -np.inf)
    zmin = np.full(n, np.inf)
    np.maximum.at(zmax, i, z[j])
    np.minimum.at(zmin, i, z[j])
    height_diff = zmax - zmin

    steepness = np.degrees(np.arccos(np.clip(normals[:, 2], -1.0, 1.0)))

    nsum = np.zeros((n, 3))
    np.add.at(nsum, i, normals[j])
    norm = np.linalg.norm(nsum, axis=1)
    mean_dir = nsum / np.where(norm > 0, norm, 1.0)[:, None]
    cos_r = np.clip(np.einsum("ij,ij->i", normals, mean_dir), -1.0, 1.0)
    roughness = np.degrees(np.arccos(cos_r))
    roughness[norm == 0] = 0.0

    labels = np.asarray(mesh.vertex_labels)
    ok = labels >= 0
    if cfg.traversable_labels is not None:
        ok &= np.isin(labels, np.fromiter(cfg.traversable_labels, dtype=np.int64))
    traversable = (
        ok
        & (height_diff <= cfg.max_height_diff)
        & (steepness <= cfg.max_steepness)
        & (roughness <= cfg.max_roughness)
    )
    return TraversabilityScores(height_diff, steepness, roughness, traversable)


@dataclass
class OccupancyGrid:
    origin: np.ndarray
    resolution: float
    cells: np.ndarray  # int8 (nx, ny) of FREE / OCCUPIED / UNKNOWN
    occupancy_fraction: np.ndarray = field(default=None)

    @property
    def shape(self):
        return self.cells.shape

    def world_to_cell(self, p) -> tuple[int, int]:
        c = np.floor((np.asarray(p, dtype=np.float64)[:2] - self.origin) / self.resolution).astype(int)
        return int(c[0]), int(c[1])

    def cell_to_world(self, c) -> np.ndarray:
        return self.origin + (np.asarray(c, dtype=np.float64) + 0.5) * self.resolution

    def is_free(self, c) -> bool:
        i, j = c
        return 0 <= i < self.cells.shape[0] and 0 <= j < self.cells.shape[1] and self.cells[i, j] == FREE

    def save(self, pgm_path, meta_path=None, cfg: TraversabilityConfig | None = None):
        """8-bit PGM (255 free, 0 occupied, 205 unknown) plus a key = value sidecar.

        Image rows run along +y from the top, columns along +x.
        """
        lut = np.array([255, 0, 205], dtype=np.uint8)
        img = lut[self.cells].T[::-1]
        h, w = img.shape
        with open(pgm_path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(np.ascontiguousarray(img).tobytes())
        meta_path = meta_path or Path(pgm_path).with_suffix(".meta")
        lines = [
            f"origin_x = {float(self.origin[0])!r}",
            f"origin_y = {float(self.origin[1])!r}",
            f"resolution = {float(self.resolution)!r}",
            f"width = {self.cells.shape[0]}",
            f"height = {self.cells.shape[1]}",
        ]
        if cfg is not None:
            lines += [
                f"radius = {cfg.radius!r}",
                f"max_height_diff = {cfg.max_height_diff!r}",
                f"max_steepness = {cfg.max_steepness!r}",
                f"max_roughness = {cfg.max_roughness!r}",
                f"inflation_radius = {cfg.inflation_radius!r}",
            ]
        Path(meta_path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, pgm_path, meta_path=None) -> OccupancyGrid:
        meta_path = meta_path or Path(pgm_path).with_suffix(".meta")
        meta = {}
        for line in Path(meta_path).read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
        data = Path(pgm_path).read_bytes()
        m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
        if m is None:
            raise ValueError(f"{pgm_path}: not a binary PGM")
        w, h = int(m.group(1)), int(m.group(2))
        img = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
        raw = img[::-1].T
        cells = np.full(raw.shape, UNKNOWN, dtype=np.int8)
        cells[raw == 255] = FREE
        cells[raw == 0] = OCCUPIED
        origin = np.array([float(meta["origin_x"]), float(meta["origin_y"])])
        return cls(origin, float(meta["resolution"]), cells)


def project_occupancy(
    scores: TraversabilityScores,
    mesh: LabeledMesh,
    cfg: TraversabilityConfig | None = None,
    origin=None,
    shape=None,
) -> OccupancyGrid:
    cfg = cfg or TraversabilityConfig()
    res = cfg.grid_resolution
    xy = np.asarray(mesh.vertices, dtype=np.float64)[:, :2]
    if origin is None:
        origin = np.floor(xy.min(axis=0) / res) * res if len(xy) else np.zeros(2)
    origin = np.asarray(origin, dtype=np.float64)
    cell = np.floor((xy - origin) / res).astype(np.int64)
    if shape is None:
        shape = tuple(cell.max(axis=0) + 1) if len(cell) else (0, 0)
    inside = np.all((cell >= 0) & (cell < np.asarray(shape)), axis=1)
    cell, bad = cell[inside], ~scores.traversable[inside]
    total = np.zeros(shape, dtype=np.int64)
    untrav = np.zeros(shape, dtype=np.int64)
    np.add.at(total, (cell[:, 0], cell[:, 1]), 1)
    np.add.at(untrav, (cell[:, 0], cell[:, 1]), bad.astype(np.int64))
    frac = np.divide(untrav, total, out=np.zeros(shape), where=total > 0)

    cells = np.full(shape, UNKNOWN, dtype=np.int8)
    cells[total > 0] = OCCUPIED
    cells[(total > 0) & (untrav == 0)] = FREE
    if cfg.inflation_radius > 0:
        r = int(math.ceil(cfg.inflation_radius / res))
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        disk = (xx * xx + yy * yy) * res * res <= cfg.inflation_radius**2
        grown = ndimage.binary_dilation(cells == OCCUPIED, structure=disk)
        cells[grown & (cells == FREE)] = OCCUPIED
    return OccupancyGrid(origin, res, cells, frac)


@dataclass
class PlannedPath:
    cells: list[tuple[int, int]]
    cost: float  # meters
    straight_steps: int
    diagonal_steps: int
    waypoints: np.ndarray


_MOVES = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if dx or dy]


def astar(free: np.ndarray, start: tuple[int, int], goal: tuple[int, int]):
    """8-connected A* with Euclidean heuristic on a boolean free mask.

    Returns the cell path or None. Step costs are 1 and sqrt(2) (cell units).
    """
    nx, ny = free.shape
    gx, gy = goal
    g = {start: 0.0}
    parent = {start: None}
    closed = set()
    heap = [(math.hypot(start[0] - gx, start[1] - gy), 0.0, start)]
    while heap:
        _, gc, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            path = []
            while cur is not None:
                path.append(cur)
                cur = parent[cur]
            return path[::-1]
        closed.add(cur)
        cx, cy = cur
        for dx, dy in _MOVES:
            nb = (cx + dx, cy + dy)
            if not (0 <= nb[0] < nx and 0 <= nb[1] < ny) or not free[nb] or nb in closed:
                continue
            ng = gc + (SQRT2 if dx and dy else 1.0)
            if ng < g.get(nb, math.inf):
                g[nb] = ng
                parent[nb] = cur
                heapq.heappush(heap, (ng + math.hypot(nb[0] - gx, nb[1] - gy), ng, nb))
    return None


def path_steps(cells) -> tuple[int, int]:
    c = np.asarray(cells)
    if len(c) < 2:
        return 0, 0
    diag = np.all(np.abs(np.diff(c, axis=0)) == 1, axis=1)
    return int(np.count_nonzero(~diag)), int(np.count_nonzero(diag))


def resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """Equidistant samples (by arc length) along a polyline, endpoints kept."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return points.copy()
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(math.ceil(s[-1] / spacing - 1e-9)))
    targets = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(targets, s, points[:, k]) for k in range(points.shape[1])], axis=1)


def plan_path(grid: OccupancyGrid, start, goal) -> PlannedPath:
    """Shortest 8-connected path over free cells between two world points."""
    s = grid.world_to_cell(start)
    t = grid.world_to_cell(goal)
    for name, c in (("start", s), ("goal", t)):
        if not grid.is_free(c):
            raise InvalidEndpointError(f"{name} cell {c} is not free")
    cells = astar(grid.cells == FREE, s, t)
    if cells is None:
        raise InfeasiblePathError(f"no free path from {s} to {t}")
    straight, diag = path_steps(cells)
    cost = grid.resolution * (straight + diag * SQRT2)
    centers = np.array([grid.cell_to_world(c) for c in cells])
    waypoints = resample_polyline(centers, 2.0 * grid.resolution)
    return PlannedPath(cells, cost, straight, diag, waypoints)


def save_path_csv(path, planned: PlannedPath):
    with open(path, "w") as f:
        f.write("x,y\n")
        for x, y in planned.waypoints:
            f.write(f"{float(x)!r},{float(y)!r}\n")

"""Analytic test worlds: simulated LiDAR scans, label images and ground truth.

Scene files hold one directive per line (``#`` starts a comment)::

    plane   <z> <xmin> <xmax> <ymin> <ymax> <label>
    strip   <z> <xmin> <xmax> <ymin> <ymax> <label>      # relabels a plane region
    incline <x0> <x1> <y0> <y1> <z0> <angle_deg> <label> # z = z0 + (x - x0) tan(angle)
    box     <xmin> <ymin> <zmin> <xmax> <ymax> <zmax> <label>
    pose    <x> <y> <z> <yaw_deg>
    lidar   <width> <height_px> <theta0_deg> <delta_theta_deg>
    camera  <width> <height> <fx> <fy> <cx> <cy> <yaw_deg> <pitch_deg> <max_depth>
    noise   <range_sigma> <flip_rate>
    seed    <int>

Labels are names from the scene's label set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import EvalCloud
from .projection import PosedCloud, Pose, ProjectionModel, pixel_directions
from .semantics import Intrinsics, LabelImage, LabelSet

_EPS = 1e-9


@dataclass
class Plane:
    """Horizontal rectangle."""

    z: float
    xmin: float
    xmax: float
    ymin: float
    ymax: float
    label: str

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z - o[:, 2]) / d[:, 2]
            p = o + t[:, None] * d
        hit = (t > _EPS) & (p[:, 0] >= self.xmin) & (p[:, 0] <= self.xmax)
        hit &= (p[:, 1] >= self.ymin) & (p[:, 1] <= self.ymax)
        return np.where(hit, t, np.inf)

    def area(self):
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def sample(self, spacing):
        x = _grid_1d(self.xmin, self.xmax, spacing)
        y = _grid_1d(self.ymin, self.ymax, spacing)
        xx, yy = np.meshgrid(x, y, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, self.z)], axis=1)

    def contains_xy(self, p):
        return (
            (np.abs(p[:, 2] - self.z) < 1e-9)
            & (p[:, 0] >= self.xmin)
            & (p[:, 0] <= self.xmax)
            & (p[:, 1] >= self.ymin)
            & (p[:, 1] <= self.ymax)
        )


class Strip(Plane):
    """Labeled sub-region of a horizontal plane; wins ties against planes."""


@dataclass
class Incline:
    x0: float
    x1: float
    y0: float
    y1: float
    z0: float
    angle: float  # degrees
    label: str

    @property
    def normal(self):
        a = math.radians(self.angle)
        return np.array([-math.sin(a), 0.0, math.cos(a)])

    def intersect(self, o, d):
        n = self.normal
        p0 = np.array([self.x0, self.y0, self.z0])
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p0 - o) @ n) / (d @ n)
            p = o + t[:, None] * d
        hit = (t > _EPS) & (p[:, 0] >= self.x0) & (p[:, 0] <= self.x1)
        hit &= (p[:, 1] >= self.y0) & (p[:, 1] <= self.y1)
        return np.where(hit, t, np.inf)

    def area(self):
        return (self.x1 - self.x0) / math.cos(math.radians(self.angle)) * (self.y1 - self.y0)

    def sample(self, spacing):
        a = math.radians(self.angle)
        s = _grid_1d(0.0, (self.x1 - self.x0) / math.cos(a), spacing)
        y = _grid_1d(self.y0, self.y1, spacing)
        ss, yy = np.meshgrid(s, y, indexing="ij")
        x = self.x0 + ss.ravel() * math.cos(a)
        z = self.z0 + ss.ravel() * math.sin(a)
        return np.stack([x, yy.ravel(), z], axis=1)

    def distance(self, p):
        """Unsigned distance of points to the (unbounded) inclined plane."""
        return np.abs((p - np.array([self.x0, self.y0, self.z0])) @ self.normal)


@dataclass
class Box:
    xmin: float
    ymin: float
    zmin: float
    xmax: float
    ymax: float
    zmax: float
    label: str

    @property
    def lo(self):
        return np.array([self.xmin, self.ymin, self.zmin])

    @property
    def hi(self):
        return np.array([self.xmax, self.ymax, self.zmax])

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (self.lo - o) * inv
            t2 = (self.hi - o) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tn = np.max(np.minimum(t1, t2), axis=1)
        tf = np.min(np.maximum(t1, t2), axis=1)
        hit = (tn <= tf) & (tn > _EPS)
        return np.where(hit, tn, np.inf)

    def faces(self):
        """The six faces as (fixed axis, value, outward sign)."""
        return [(k, v, s) for k in range(3) for v, s in ((self.lo[k], -1), (self.hi[k], 1))]

    def area(self, skip=()):
        e = self.hi - self.lo
        total = 0.0
        for i, (k, _, _) in enumerate(self.faces()):
            if i not in skip:
                a, b = [j for j in range(3) if j != k]
                total += e[a] * e[b]
        return total

    def sample(self, spacing, skip=()):
        out = []
        for i, (k, val, _) in enumerate(self.faces()):
            if i in skip:
                continue
            a, b = [j for j in range(3) if j != k]
            ga = _grid_1d(self.lo[a], self.hi[a], spacing)
            gb = _grid_1d(self.lo[b], self.hi[b], spacing)
            aa, bb = np.meshgrid(ga, gb, indexing="ij")
            p = np.empty((aa.size, 3))
            p[:, k] = val
            p[:, a] = aa.ravel()
            p[:, b] = bb.ravel()
            out.append(p)
        return np.concatenate(out) if out else np.zeros((0, 3))

    def contains(self, p, tol=1e-9):
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=1)

    def distance(self, p):
        """Euclidean distance from points to the box surface."""
        q = np.maximum(self.lo - p, p - self.hi)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return np.abs(outside + inside)


def _grid_1d(lo, hi, spacing):
    n = max(1, int(round((hi - lo) / spacing)))
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


@dataclass
class CameraModel:
    width: int = 160
    height: int = 120
    fx: float = 80.0
    fy: float = 80.0
    cx: float = 80.0
    cy: float = 60.0
    yaw: float = 0.0  # degrees, left positive, relative to the sensor heading
    pitch: float = 10.0  # degrees, downward positive
    max_depth: float = 30.0

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy)

    def mount(self) -> Pose:
        """Camera -> sensor transform (camera z forward, x right, y down)."""
        base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        return Pose(_rot_z(math.radians(self.yaw)) @ _rot_y(math.radians(self.pitch)) @ base)


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def yaw_pose(x, y, z, yaw_deg) -> Pose:
    return Pose(_rot_z(math.radians(yaw_deg)), [x, y, z])


@dataclass
class SceneSpec:
    primitives: list
    trajectory: list[Pose]
    lidar: ProjectionModel = field(default_factory=ProjectionModel)
    camera: CameraModel = field(default_factory=CameraModel)
    range_sigma: float = 0.0
    flip_rate: float = 0.0
    seed: int = 0
    labels: LabelSet = field(default_factory=LabelSet.default)

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")
        if not 0.0 <= self.flip_rate < 1.0:
            raise ValueError("flip rate must be in [0, 1)")
        for p in self.primitives:
            self.labels.index(p.label)

    def timestamp(self, i: int) -> float:
        return 0.1 * i

    def cast(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit distance and primitive index per ray (inf / -1 on miss)."""
        best = np.full(len(dirs), np.inf)
        which = np.full(len(dirs), -1)
        for k, prim in enumerate(self.primitives):
            t = prim.intersect(origins, dirs)
            # strips win exact ties with the plane they sit on
            better = (t < best) | ((t == best) & np.isfinite(t) & isinstance(prim, Strip))
            best = np.where(better, t, best)
            which = np.where(better, k, which)
        return best, which


def render_scan(scene: SceneSpec, pose_index: int) -> PosedCloud:
    """Simulated scan through the pixel centers of the LiDAR model."""
    pose = scene.trajectory[pose_index]
    m = scene.lidar
    vv, uu = np.mgrid[0 : m.height_px, 0 : m.width]
    dirs = pixel_directions(uu.ravel(), vv.ravel(), m)
    dirs_w = dirs @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs_w.shape)
    t, _ = scene.cast(origins, dirs_w)
    hit = np.isfinite(t) & (t > m.min_range)
    r = t[hit]
    if scene.range_sigma > 0:
        rng = np.random.default_rng([scene.seed, pose_index, 0])
        r = r + rng.normal(0.0, scene.range_sigma, size=r.shape)
    return PosedCloud(dirs[hit] * r[:, None], pose, scene.timestamp(pose_index))


def camera_pose(scene: SceneSpec, pose_index: int) -> Pose:
    return scene.trajectory[pose_index].compose(scene.camera.mount())


def render_labels(scene: SceneSpec, pose_index: int) -> LabelImage:
    cam = scene.camera
    pose = camera_pose(scene, pose_index)
    vv, uu = np.mgrid[0 : cam.height, 0 : cam.width]
    d = np.stack([(uu + 0.5 - cam.cx) / cam.fx, (vv + 0.5 - cam.cy) / cam.fy, np.ones(uu.shape)], axis=-1)
    d = d.reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    dirs_w = d @ pose.rotation.T
    t, which = scene.cast(np.broadcast_to(pose.translation, dirs_w.shape), dirs_w)

    ls = scene.labels
    unl = ls.unlabeled_id
    prim_ids = np.array([ls.index(p.label) for p in scene.primitives])
    labels = np.where(which >= 0, prim_ids[np.maximum(which, 0)], unl if unl is not None else 0)
    if scene.flip_rate > 0:
        rng = np.random.default_rng([scene.seed, pose_index, 1])
        real = np.array([i for i in range(len(ls)) if i != unl])
        flip = (which >= 0) & (rng.random(len(labels)) < scene.flip_rate)
        # uniform over the other real classes
        pos_in_real = np.searchsorted(real, labels)
        shift = rng.integers(1, len(real), size=len(labels))
        flipped = real[(pos_in_real + shift) % len(real)]
        labels = np.where(flip, flipped, labels)
    labels = labels.reshape(cam.height, cam.width)
    conf = np.full(labels.shape, 0.9)
    return LabelImage(
        labels.astype(np.int64), cam.intrinsics, pose, conf, max_depth=cam.max_depth,
        timestamp=scene.timestamp(pose_index),
    )


def ground_truth_cloud(scene: SceneSpec, density: float) -> EvalCloud:
    """Regular surface sampling of every primitive at ``density`` points per m^2.

    Surfaces that can never be seen are left out: box faces lying on a plane,
    plane samples covered by a box or by a strip.
    """
    spacing = 1.0 / math.sqrt(density)
    planes = [p for p in scene.primitives if type(p) is Plane]
    strips = [p for p in scene.primitives if isinstance(p, Strip)]
    boxes = [p for p in scene.primitives if isinstance(p, Box)]
    pts, labs = [], []
    ls = scene.labels
    for prim in scene.primitives:
        if isinstance(prim, Box):
            skip = [
                i for i, (k, val, s) in enumerate(prim.faces())
                if k == 2 and s < 0 and any(
                    abs(pl.z - val) < 1e-9 and pl.xmin <= prim.xmin and prim.xmax <= pl.xmax
                    and pl.ymin <= prim.ymin and prim.ymax <= pl.ymax
                    for pl in planes
                )
            ]
            p = prim.sample(spacing, skip)
        else:
            p = prim.sample(spacing)
        if type(prim) is Plane:
            for s in strips:
                p = p[~s.contains_xy(p)]
        if not isinstance(prim, Box):
            for b in boxes:
                p = p[~b.contains(p)]
        pts.append(p)
        labs.append(np.full(len(p), ls.index(prim.label)))
    return EvalCloud(np.concatenate(pts), np.concatenate(labs))


# -- scene files ----------------------------------------------------------------------------


def parse_scene(text: str, labels: LabelSet | None = None) -> SceneSpec:
    prims, poses = [], []
    lidar, camera = ProjectionModel(), CameraModel()
    sigma, flip, seed = 0.0, 0.0, 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kw, *args = line.split()
        try:
            if kw in ("plane", "strip"):
                cls = Plane if kw == "plane" else Strip
                prims.append(cls(*map(float, args[:5]), args[5]))
            elif kw == "incline":
                prims.append(Incline(*map(float, args[:6]), args[6]))
            elif kw == "box":
                prims.append(Box(*map(float, args[:6]), args[6]))
            elif kw == "pose":
                poses.append(yaw_pose(*map(float, args[:4])))
            elif kw == "lidar":
                w, h, t0, dt = args
                lidar = ProjectionModel(int(w), int(h), math.radians(float(dt)), math.radians(float(t0)))
            elif kw == "camera":
                w, h, *rest = args
                camera = CameraModel(int(w), int(h), *map(float, rest))
            elif kw == "noise":
                sigma, flip = float(args[0]), float(args[1])
            elif kw == "seed":
                seed = int(args[0])
            else:
                raise ValueError(f"unknown directive {kw!r}")
        except (TypeError, ValueError, IndexError) as e:
            raise ValueError(f"scene line {lineno}: {e}") from None
    return SceneSpec(prims, poses, lidar, camera, sigma, flip, seed, labels or LabelSet.default())


def _f(x) -> str:
    return repr(float(x))


def format_scene(scene: SceneSpec) -> str:
    out = []
    for p in scene.primitives:
        if isinstance(p, Plane):
            kw = "strip" if isinstance(p, Strip) else "plane"
            out.append(f"{kw} {_f(p.z)} {_f(p.xmin)} {_f(p.xmax)} {_f(p.ymin)} {_f(p.ymax)} {p.label}")
        elif isinstance(p, Incline):
            out.append(f"incline {_f(p.x0)} {_f(p.x1)} {_f(p.y0)} {_f(p.y1)} {_f(p.z0)} {_f(p.angle)} {p.label}")
        else:
            vals = " ".join(_f(v) for v in (p.xmin, p.ymin, p.zmin, p.xmax, p.ymax, p.zmax))
            out.append(f"box {vals} {p.label}")
    for pose in scene.trajectory:
        yaw = math.degrees(math.atan2(pose.rotation[1, 0], pose.rotation[0, 0]))
        x, y, z = pose.translation
        out.append(f"pose {_f(x)} {_f(y)} {_f(z)} {_f(yaw)}")
    m, c = scene.lidar, scene.camera
    out.append(f"lidar {m.width} {m.height_px} {_f(math.degrees(m.theta0))} {_f(math.degrees(m.delta_theta))}")
    out.append(
        f"camera {c.width} {c.height} "
        + " ".join(_f(v) for v in (c.fx, c.fy, c.cx, c.cy, c.yaw, c.pitch, c.max_depth))
    )
    out.append(f"noise {_f(scene.range_sigma)} {_f(scene.flip_rate)}")
    out.append(f"seed {scene.seed}")
    return "\n".join(out) + "\n"


def load_scene(path, labels: LabelSet | None = None) -> SceneSpec:
    return parse_scene(Path(path).read_text(), labels)


# -- preset worlds --------------------------------------------------------------------------


def circle_trajectory(n, radius, height, center=(0.0, 0.0), turns=1.0):
    poses = []
    for i in range(n):
        a = 2.0 * math.pi * turns * i / n
        x = center[0] + radius * math.cos(a)
        y = center[1] + radius * math.sin(a)
        poses.append(yaw_pose(x, y, height, math.degrees(a) + 90.0))
    return poses


def flat_world(n_poses=50, range_sigma=0.0, flip_rate=0.0, seed=0) -> SceneSpec:
    """Ground plane with two boxes, driven around on a circle."""
    prims = [
        Plane(0.0, -12.0, 12.0, -12.0, 12.0, "road"),
        Box(1.5, -1.0, 0.0, 3.5, 1.0, 1.2, "building"),
        Box(-4.0, -3.5, 0.0, -2.0, -0.5, 1.0, "building"),
    ]
    camera = CameraModel(yaw=40.0, pitch=15.0, max_depth=20.0)
    return SceneSpec(
        prims, circle_trajectory(n_poses, 7.0, 1.8), ProjectionModel(), camera,
        range_sigma, flip_rate, seed,
    )


def incline_world(n_poses=20, angle=45.0, seed=0) -> SceneSpec:
    """A 45 degree ramp seen from a straight drive past its foot."""
    prims = [Incline(2.0, 6.0, -6.0, 6.0, 0.0, angle, "building")]
    poses = [yaw_pose(-4.0 + 0.2 * i, -8.0 + 0.8 * i, 1.0, 20.0) for i in range(n_poses)]
    return SceneSpec(prims, poses, ProjectionModel(), CameraModel(), 0.0, 0.0, seed)


def grass_strip_world(n_poses=40, seed=0) -> SceneSpec:
    """Road with a grass strip across the middle except for a detour lane."""
    prims = [
        Plane(0.0, -10.0, 10.0, -10.0, 10.0, "road"),
        Strip(0.0, -1.0, 1.0, -7.0, 10.0, "grass"),
    ]
    return SceneSpec(
        prims, circle_trajectory(n_poses, 6.0, 1.8), ProjectionModel(),
        CameraModel(yaw=40.0, pitch=20.0, max_depth=15.0), 0.0, 0.0, seed,
    )


def corridor_world(n_poses=200, step=0.5, seed=0) -> SceneSpec:
    """Long straight street between two walls, for frame-cost scaling."""
    length = n_poses * step + 30.0
    prims = [
        Plane(0.0, -15.0, length, -6.0, 6.0, "road"),
        Box(-15.0, 6.0, 0.0, length, 7.0, 3.0, "building"),
        Box(-15.0, -7.0, 0.0, length, -6.0, 3.0, "building"),
    ]
    poses = [yaw_pose(i * step, 0.0, 1.8, 0.0) for i in range(n_poses)]
    return SceneSpec(prims, poses, ProjectionModel(), CameraModel(), 0.0, 0.0, seed)

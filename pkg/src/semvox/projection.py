"""Spherical projection of posed LiDAR clouds into depth / height / normal images."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ProjectionModel:
    """Spinning-LiDAR image model.

    ``theta0`` is the polar angle (from +z) of the top image row and
    ``delta_theta`` the polar step per row; the horizontal step always spans a
    full revolution over ``width`` columns.
    """

    width: int = 512
    height_px: int = 64
    delta_theta: float = math.radians(0.75)
    theta0: float = math.radians(70.0)
    scale: float = 256.0
    offset: float = 0.0
    min_range: float = 0.3

    def __post_init__(self):
        if self.width <= 0 or self.height_px <= 0:
            raise ValueError("image dimensions must be positive")
        if not self.delta_theta > 0:
            raise ValueError("delta_theta must be positive")

    @property
    def delta_phi(self) -> float:
        return 2.0 * math.pi / self.width


@dataclass
class Pose:
    """Rigid sensor->world transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.translation

    def inverse_apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.translation) @ self.rotation

    def compose(self, other: Pose) -> Pose:
        """``self * other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    @classmethod
    def from_quaternion(cls, t, q_xyzw) -> Pose:
        x, y, z, w = np.asarray(q_xyzw, dtype=np.float64) / np.linalg.norm(q_xyzw)
        rot = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )
        return cls(rot, t)

    def quaternion(self) -> np.ndarray:
        """Rotation as (qx, qy, qz, qw) with qw >= 0."""
        r = self.rotation
        tr = np.trace(r)
        if tr > 0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q = [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s, (r[2, 1] - r[1, 2]) / s]
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s, (r[0, 2] - r[2, 0]) / s]
        else:
            s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s, (r[1, 0] - r[0, 1]) / s]
        q = np.asarray(q)
        return -q if q[3] < 0 else q


@dataclass
class PosedCloud:
    points: np.ndarray
    pose: Pose = field(default_factory=Pose)
    timestamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)


@dataclass
class ScanImages:
    """Range images of one scan, indexed ``[v, u]`` (row = polar angle).

    ``depth`` is the range in meters (0 = no return) and ``height`` the world z
    of the retained point. ``points`` keeps the retained sensor-frame point per
    pixel; ``normals`` (sensor frame) are NaN where absent.
    """

    depth: np.ndarray
    height: np.ndarray
    points: np.ndarray
    pose: Pose
    normals: np.ndarray | None = None
    dropped: int = 0
    timestamp: float = 0.0

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    @property
    def normal_valid(self) -> np.ndarray:
        if self.normals is None:
            return np.zeros(self.depth.shape, dtype=bool)
        return np.isfinite(self.normals[..., 0])


def pixel_coords(points: np.ndarray, model: ProjectionModel):
    """Integer pixel (u, v) and range of sensor-frame points."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    u = np.floor((math.pi - np.arctan2(y, x)) / model.delta_phi).astype(np.int64) % model.width
    with np.errstate(invalid="ignore", divide="ignore"):
        polar = np.arccos(np.clip(z / r, -1.0, 1.0))
    v = np.floor((polar - model.theta0) / model.delta_theta).astype(np.int64)
    return u, v, r


def project_cloud(cloud: PosedCloud, model: ProjectionModel) -> ScanImages:
    pts = cloud.points
    finite = np.all(np.isfinite(pts), axis=1)
    pts = pts[finite]
    u, v, r = pixel_coords(pts, model)
    keep = (r > model.min_range) & (v >= 0) & (v < model.height_px)
    dropped = int(np.count_nonzero(~keep) + np.count_nonzero(~finite))
    pts, u, v, r = pts[keep], u[keep], v[keep], r[keep]

    depth = np.zeros((model.height_px, model.width))
    height = np.zeros((model.height_px, model.width))
    points = np.zeros((model.height_px, model.width, 3))
    if pts.size:
        pix = v * model.width + u
        # nearest range wins; ties broken by coordinates for permutation invariance
        order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], r, pix))
        pix, first = np.unique(pix[order], return_index=True)
        sel = order[first]
        dropped += len(order) - len(sel)
        flat_depth = depth.reshape(-1)
        flat_depth[pix] = r[sel]
        points.reshape(-1, 3)[pix] = pts[sel]
        world_z = cloud.pose.apply(pts[sel])[:, 2]
        height.reshape(-1)[pix] = world_z
    return ScanImages(depth, height, points, cloud.pose, dropped=dropped, timestamp=cloud.timestamp)


def pixel_directions(u, v, model: ProjectionModel) -> np.ndarray:
    """Unit sensor-frame ray through the center of pixel(s) (u, v)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    phi = math.pi - (u + 0.5) * model.delta_phi
    polar = model.theta0 + (v + 0.5) * model.delta_theta
    s = np.sin(polar)
    return np.stack([s * np.cos(phi), s * np.sin(phi), np.cos(polar)], axis=-1)


def back_project(u, v, depth, model: ProjectionModel) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("back_project requires depth > 0")
    return pixel_directions(u, v, model) * depth[..., None]


def compute_normal_image(img: ScanImages, model: ProjectionModel) -> ScanImages:
    """Fill ``img.normals`` from cross products of back-projected neighbours.

    The neighbours are the pixels one row up and one column left. Border pixels,
    pixels with a missing neighbour, and degenerate cross products stay NaN.
    """
    h, w = img.depth.shape
    vv, uu = np.mgrid[0:h, 0:w]
    dirs = pixel_directions(uu, vv, model)
    pts = dirs * img.depth[..., None]
    normals = np.full((h, w, 3), np.nan)

    p = pts[1:-1, 1:-1]
    p1 = pts[:-2, 1:-1]  # (u, v-1)
    p2 = pts[1:-1, :-2]  # (u-1, v)
    d = img.depth
    ok = (d[1:-1, 1:-1] > 0) & (d[:-2, 1:-1] > 0) & (d[1:-1, :-2] > 0)
    n = np.cross(p1 - p, p2 - p)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm >= 1e-8
    n = n / np.where(ok, norm, 1.0)[..., None]
    flip = np.einsum("ijk,ijk->ij", n, -p) < 0
    n[flip] *= -1.0
    n[~ok] = np.nan
    normals[1:-1, 1:-1] = n
    img.normals = normals
    return img


def to_png16(values: np.ndarray, valid: np.ndarray, scale: float, offset: float) -> np.ndarray:
    """Quantize an image for 16-bit export: round(F*value + F*O) clamped to [0, 65535]."""
    q = np.rint(scale * values + scale * offset)
    q = np.clip(q, 0, 65535).astype(np.uint16)
    q[~valid] = 0
    return q


def export_png(img: ScanImages, model: ProjectionModel, depth_path, height_path):
    """Write depth and height as 16-bit grayscale PNGs.

    The height offset is raised above ``model.offset`` when needed so that the
    lowest valid height stays nonnegative.
    """
    from PIL import Image

    valid = img.valid
    offset = model.offset
    if valid.any():
        offset = max(offset, -float(img.height[valid].min()))
    Image.fromarray(to_png16(img.depth, valid, model.scale, 0.0)).save(depth_path)
    Image.fromarray(to_png16(img.height, valid, model.scale, offset)).save(height_path)
    return offset

"""Per-voxel class distributions fused from labeled camera images."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .projection import Pose
from .tsdf import FrameReport
from .voxel_store import LOCAL_OFFSETS, VoxelStore, unique_rows

LIKELIHOOD_FLOOR = 1e-3
DEFAULT_CONFIDENCE = 0.9

DEFAULT_LABELS = (
    ("road", (128, 64, 128)),
    ("sidewalk", (244, 35, 232)),
    ("building", (70, 70, 70)),
    ("grass", (152, 251, 152)),
    ("vegetation", (107, 142, 35)),
    ("vehicle", (0, 0, 142)),
    ("pole", (153, 153, 153)),
    ("unlabeled", (0, 0, 0)),
)


@dataclass
class LabelSet:
    names: list[str]
    colors: list[tuple[int, int, int]]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("label names must be unique")
        if len(self.colors) != len(self.names):
            raise ValueError("one color per label required")

    @classmethod
    def default(cls) -> LabelSet:
        return cls([n for n, _ in DEFAULT_LABELS], [c for _, c in DEFAULT_LABELS])

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def unlabeled_id(self) -> int | None:
        return self.names.index("unlabeled") if "unlabeled" in self.names else None

    @classmethod
    def load(cls, path) -> LabelSet:
        """Read ``name r g b`` lines; ``#`` starts a comment."""
        names, colors = [], []
        with open(path) as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                name, r, g, b = line.split()
                names.append(name)
                colors.append((int(r), int(g), int(b)))
        return cls(names, colors)

    def save(self, path):
        with open(path, "w") as f:
            for n, (r, g, b) in zip(self.names, self.colors):
                f.write(f"{n} {r} {g} {b}\n")


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass
class LabelImage:
    """Per-pixel class ids seen by a pinhole camera (z forward, x right, y down)."""

    labels: np.ndarray
    intrinsics: Intrinsics
    pose: Pose
    confidence: np.ndarray | None = None
    probabilities: np.ndarray | None = None
    max_depth: float = 30.0
    timestamp: float = 0.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.confidence is not None and self.confidence.shape != self.labels.shape:
            raise ValueError("confidence image must match label image dimensions")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class SemanticConfig:
    bayes: bool = True
    occlusion: str = "raycast"  # or "surrogate"
    occlusion_margin: float | None = None  # None: two voxels
    keep_unresolved: bool = False  # raycast found no surface: update anyway?
    max_grazing_factor: float = 10.0  # cap on the incidence-scaled tolerance, in margins
    edge_ratio: float | None = 0.2  # relative range jump marking a silhouette pixel
    default_confidence: float = DEFAULT_CONFIDENCE
    unlabeled_id: int | None = field(default=None)

    def __post_init__(self):
        if self.occlusion not in ("raycast", "surrogate"):
            raise ValueError(f"unknown occlusion mode {self.occlusion!r}")


def label_to_likelihood(label_id, confidence, num_labels: int) -> np.ndarray:
    """Hard label(s) to class likelihood rows, floored and renormalized."""
    label_id = np.asarray(label_id, dtype=np.int64)
    c = np.broadcast_to(np.asarray(confidence, dtype=np.float64), label_id.shape)
    if np.any((c < 0) | (c > 1)):
        raise ValueError("confidence must be in [0, 1]")
    if num_labels == 1:
        return np.ones(label_id.shape + (1,))
    out = np.repeat(((1.0 - c) / (num_labels - 1))[..., None], num_labels, axis=-1)
    np.put_along_axis(out, label_id[..., None], c[..., None], axis=-1)
    out = np.maximum(out, LIKELIHOOD_FLOOR)
    return out / out.sum(axis=-1, keepdims=True)


def bayes_update(prior, likelihood) -> np.ndarray:
    post = np.asarray(prior, dtype=np.float64) * np.asarray(likelihood, dtype=np.float64)
    return post / post.sum(axis=-1, keepdims=True)


def _frustum_blocks(store: VoxelStore, img: LabelImage) -> np.ndarray:
    coords = store.block_coords()
    if not len(coords):
        return np.zeros(0, dtype=np.int64)
    nu = store.config.voxel_size
    ext = store.config.block_extent
    centers = (coords * 8 + 3.5) * nu
    pc = img.pose.inverse_apply(centers)
    radius = ext * np.sqrt(3) / 2
    k = img.intrinsics
    planes = np.array(
        [
            [1.0, 0.0, k.cx / k.fx],
            [-1.0, 0.0, (img.width - k.cx) / k.fx],
            [0.0, 1.0, k.cy / k.fy],
            [0.0, -1.0, (img.height - k.cy) / k.fy],
        ]
    )
    planes /= np.linalg.norm(planes, axis=1, keepdims=True)
    inside = np.all(pc @ planes.T >= -radius, axis=1)
    inside &= (pc[:, 2] > -radius) & (pc[:, 2] < img.max_depth + radius)
    return np.flatnonzero(inside)


def _pixel_rays(img: LabelImage) -> np.ndarray:
    """Unit camera-frame rays through the pixel centers, shape (H, W, 3)."""
    k = img.intrinsics
    vv, uu = np.mgrid[0 : img.height, 0 : img.width]
    dirs = np.stack([(uu + 0.5 - k.cx) / k.fx, (vv + 0.5 - k.cy) / k.fy, np.ones(uu.shape)], axis=-1)
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def raycast_surface(store: VoxelStore, img: LabelImage, step: float | None = None):
    """March every pixel-center ray to the first observed +/- zero crossing.

    Returns (range, normal): range is NaN where no crossing lies within
    ``img.max_depth``; normal is the stored world-frame gradient at the
    crossing (NaN where absent).
    """
    nu = store.config.voxel_size
    step = step or nu
    dirs_w = _pixel_rays(img).reshape(-1, 3) @ img.pose.rotation.T
    origin = img.pose.translation
    rng = np.full(len(dirs_w), np.nan)
    nrm = np.full((len(dirs_w), 3), np.nan)
    t_vals = np.arange(step, img.max_depth + step, step)
    active = np.arange(len(dirs_w))
    seg = 32  # steps per pass; rays that found their crossing drop out
    for k0 in range(0, len(t_vals) - 1, seg):
        if not active.size:
            break
        t = t_vals[k0 : k0 + seg + 1]  # one step of overlap with the next pass
        pts = origin + t[None, :, None] * dirs_w[active][:, None, :]
        v = np.floor(pts / nu + 0.5).astype(np.int64)
        dist, weight, _ = store.gather(v)
        obs = weight > 0
        cross = (obs & (dist > 0))[:, :-1] & (obs & (dist <= 0))[:, 1:]
        hit = cross.any(axis=1)
        rows = np.flatnonzero(hit)
        i = np.argmax(cross[rows], axis=1)
        d0 = dist[rows, i].astype(np.float64)
        d1 = dist[rows, i + 1].astype(np.float64)
        rng[active[rows]] = t[i] + step * d0 / (d0 - d1)
        near = np.where(np.abs(d0) < np.abs(d1), i, i + 1)
        nrm[active[rows]] = store.flat_gradient[store.flat_index(v[rows, near])]
        active = active[~hit]
    return rng.reshape(img.height, img.width), nrm.reshape(img.height, img.width, 3)


def raycast_surface_range(store: VoxelStore, img: LabelImage, step: float | None = None) -> np.ndarray:
    """Range image of :func:`raycast_surface` alone."""
    return raycast_surface(store, img, step)[0]


def _mask_depth_edges(surf: np.ndarray, ratio: float | None) -> np.ndarray:
    """Set pixels next to a range discontinuity (or a missing range) to NaN.

    A pixel is on an edge when any of its 8 neighbours differs in range by more
    than ``ratio`` times its own range.
    """
    if ratio is None:
        return surf
    h, w = surf.shape
    pad = np.pad(surf, 1, constant_values=np.nan)
    edge = np.zeros(surf.shape, dtype=bool)
    for dv in range(3):
        for du in range(3):
            nb = pad[dv : dv + h, du : du + w]
            with np.errstate(invalid="ignore"):
                edge |= ~(np.abs(nb - surf) <= ratio * surf)
    return np.where(edge, np.nan, surf)


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel coordinates (centers at integers).

    NaN when any of the four taps is NaN or outside the image.
    """
    h, w = img.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    out = np.zeros(len(x))
    ok = np.ones(len(x), dtype=bool)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            val = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            ok &= inside
            out += wx * wy * np.where(inside, val, 0.0)
    return np.where(ok, out, np.nan)


def _visible_near_surface(store, img, cfg, pc, keep):
    """Occlusion test of candidate voxels against the ray-cast surface.

    The surface depth along each voxel's own viewing ray is interpolated in
    inverse depth from the pixel-center casts (exact for planar patches). A
    voxel passes when its range differs from that surface range by at most
    ``margin / cos(incidence)``, i.e. it lies within ``margin`` of the surface
    measured along the surface normal.
    """
    nu = store.config.voxel_size
    margin = cfg.occlusion_margin if cfg.occlusion_margin is not None else 2.0 * nu
    rng, nrm = raycast_surface(store, img)
    rng = _mask_depth_edges(rng, cfg.edge_ratio)
    rays = _pixel_rays(img)
    inv_depth = 1.0 / (rng * rays[..., 2])

    idx = np.flatnonzero(keep)
    k = img.intrinsics
    p = pc[idx]
    xn, yn = p[:, 0] / p[:, 2], p[:, 1] / p[:, 2]
    uf = k.fx * xn + k.cx - 0.5
    vf = k.fy * yn + k.cy - 0.5
    z_surf = 1.0 / _bilinear(inv_depth, uf, vf)
    scale = np.sqrt(xn * xn + yn * yn + 1.0)
    diff = np.abs(p[:, 2] - z_surf) * scale  # range difference along the voxel's ray

    ui = np.clip(np.rint(uf).astype(np.int64), 0, img.width - 1)
    vi = np.clip(np.rint(vf).astype(np.int64), 0, img.height - 1)
    n_cam = nrm[vi, ui] @ img.pose.rotation  # world -> camera frame
    ray = p / np.linalg.norm(p, axis=1, keepdims=True)
    cos_inc = np.abs(np.einsum("ij,ij->i", n_cam, ray))
    with np.errstate(divide="ignore", invalid="ignore"):
        tol = np.minimum(margin / cos_inc, cfg.max_grazing_factor * margin)
    tol = np.where(np.isfinite(tol), tol, margin)
    ok = diff <= tol  # NaN (no surface) fails
    if cfg.keep_unresolved:
        ok |= np.isnan(z_surf)
    keep = keep.copy()
    keep[idx] = ok
    return keep


def integrate_labels(
    img: LabelImage, store: VoxelStore, cfg: SemanticConfig | None = None, frame: int = 0
) -> FrameReport:
    """Update the class distribution of observed voxels visible in ``img``."""
    t_start = time.perf_counter()
    cfg = cfg or SemanticConfig()
    nu = store.config.voxel_size
    tau = store.config.truncation
    num_labels = store.config.num_labels
    if img.labels.size and (img.labels.min() < 0 or img.labels.max() >= num_labels):
        raise ValueError(f"label ids must lie in [0, {num_labels})")
    if img.probabilities is not None and img.probabilities.shape != img.labels.shape + (num_labels,):
        raise ValueError("probability image must be (H, W, K)")

    blocks = _frustum_blocks(store, img)
    if not blocks.size:
        return FrameReport(0, 0, time.perf_counter() - t_start, frame)
    coords = store.block_coords()[blocks]
    slots = store.slots_for_blocks(coords)
    weight = store._weight[slots]
    bi, lin = np.nonzero(weight > 0)
    vox = coords[bi] * 8 + LOCAL_OFFSETS[lin]
    slot = slots[bi]
    dist = store._dist[slot, lin]

    pc = img.pose.inverse_apply(vox * nu)
    z = pc[:, 2]
    k = img.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.floor(k.fx * pc[:, 0] / z + k.cx)
        v = np.floor(k.fy * pc[:, 1] / z + k.cy)
    keep = (z > 0) & (z <= img.max_depth) & (u >= 0) & (u < img.width) & (v >= 0) & (v < img.height)
    keep &= dist >= -0.5 * tau
    u, v = u.astype(np.int64), v.astype(np.int64)

    if cfg.occlusion == "raycast" and keep.any():
        keep = _visible_near_surface(store, img, cfg, pc, keep)

    idx = np.flatnonzero(keep)
    uu, vv = u[idx], v[idx]
    labels = img.labels[vv, uu].astype(np.int64)
    if img.probabilities is not None:
        like = np.maximum(img.probabilities[vv, uu].astype(np.float64), LIKELIHOOD_FLOOR)
        like /= like.sum(axis=1, keepdims=True)
    else:
        conf = img.confidence[vv, uu] if img.confidence is not None else cfg.default_confidence
        if cfg.unlabeled_id is not None:
            labeled = labels != cfg.unlabeled_id
            idx, labels = idx[labeled], labels[labeled]
            if np.ndim(conf):
                conf = conf[labeled]
        like = label_to_likelihood(labels, conf, num_labels)
    if not idx.size:
        return FrameReport(0, 0, time.perf_counter() - t_start, frame)

    slot, lin_i = slot[idx], lin[idx]
    sem = store.ensure_semantic(slot)
    prior = store._probs[sem, lin_i].astype(np.float64)
    post = bayes_update(prior, like) if cfg.bayes else like
    store._probs[sem, lin_i] = post
    touched = unique_rows(coords[bi[idx]])
    store.dirty.update(map(tuple, touched.tolist()))
    return FrameReport(len(idx), 0, time.perf_counter() - t_start, frame)


def informative(probs: np.ndarray) -> np.ndarray:
    """True where a distribution carries evidence (is not exactly uniform)."""
    return probs.max(axis=-1) > probs.min(axis=-1)


__all__ = [
    "LabelSet",
    "LabelImage",
    "Intrinsics",
    "SemanticConfig",
    "label_to_likelihood",
    "bayes_update",
    "integrate_labels",
    "raycast_surface",
    "raycast_surface_range",
    "informative",
]

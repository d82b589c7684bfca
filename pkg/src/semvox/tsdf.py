"""Per-frame TSDF integration with projective or non-projective distances."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .projection import ScanImages
from .voxel_store import VOXELS_PER_BLOCK, VoxelStore, unique_rows, voxel_to_block

PROJECTIVE = "projective"
NON_PROJECTIVE = "non_projective"


@dataclass(frozen=True)
class IntegratorConfig:
    mode: str = NON_PROJECTIVE
    truncation: float | None = None  # None: take the map's truncation
    max_range: float = 70.0
    alpha_epsilon: float = 1e-2
    min_weight_clamp: float = 0.01
    drop_without_normal: bool = False

    def __post_init__(self):
        if self.mode not in (PROJECTIVE, NON_PROJECTIVE):
            raise ValueError(f"unknown integration mode {self.mode!r}")
        if self.truncation is not None and not self.truncation > 0:
            raise ValueError("truncation must be positive")
        if not self.alpha_epsilon > 0:
            raise ValueError("alpha_epsilon must be positive")


@dataclass
class FrameReport:
    updated_voxels: int
    new_blocks: int
    elapsed: float
    frame: int = 0
    labeled_voxels: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "frame": self.frame,
                "updated_voxels": self.updated_voxels,
                "new_blocks": self.new_blocks,
                "labeled_voxels": self.labeled_voxels,
                "elapsed_ms": round(self.elapsed * 1e3, 3),
            }
        )


def truncate(d, tau):
    return np.clip(d, -tau, tau)


def observation_weight(psi, tau, min_weight_clamp=0.01):
    return np.clip((np.asarray(psi) + tau) / (2.0 * tau), min_weight_clamp, 1.0)


def projective_distance(voxel_center, sensor_origin, measured_point):
    """Signed distance along the sensor ray; positive on the sensor side."""
    x = np.asarray(voxel_center, dtype=np.float64)
    o = np.asarray(sensor_origin, dtype=np.float64)
    q = np.asarray(measured_point, dtype=np.float64)
    ray = q - o
    rng = np.linalg.norm(ray, axis=-1)
    if np.any(rng <= 0):
        raise ValueError("measured range must be positive")
    r_hat = ray / rng[..., None]
    return rng - np.sum((x - o) * r_hat, axis=-1)


def nonprojective_distance(psi, theta, alpha, alpha_epsilon=1e-2):
    """Normal-aware distance from the projective one.

    ``theta`` is the ray/gradient angle and ``alpha`` the gradient/measured
    normal angle. The second branch keeps the sign of ``psi``.
    """
    psi = np.asarray(psi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    cos_t = np.abs(np.cos(theta))
    flat = cos_t * psi
    sin_a = np.sin(alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.abs((np.cos(alpha) - 1.0) * np.sin(theta) / sin_a)
        corr = np.where(sin_a > 0, corr, np.inf)
        curved = np.sign(psi) * (corr + np.abs(cos_t * psi))
    curved = np.where(psi == 0, 0.0, curved)
    out = np.where(alpha < alpha_epsilon, flat, curved)
    return out if out.ndim else float(out)


def fuse_voxel(distance, weight, gradient, d, w_new, normal, tau):
    """Weighted running-average update of one voxel (or arrays of voxels)."""
    if np.any(np.asarray(w_new) < 0):
        raise ValueError("observation weight must be nonnegative")
    g = truncate(d, tau)
    w_sum = weight + w_new
    with np.errstate(invalid="ignore", divide="ignore"):
        new_d = np.where(w_sum > 0, (weight * distance + w_new * g) / w_sum, distance)
    acc = np.asarray(weight)[..., None] * np.asarray(gradient) + np.asarray(w_new)[..., None] * np.asarray(normal)
    norm = np.linalg.norm(acc, axis=-1, keepdims=True)
    new_g = np.where(norm > 0, acc / np.where(norm > 0, norm, 1.0), 0.0)
    return new_d, w_sum, new_g


def band_voxels(starts: np.ndarray, ends: np.ndarray, voxel_size: float):
    """Exact grid traversal of segments.

    Returns (segment index, voxel index rows) of every voxel cell each segment
    passes through. Voxel ``v`` owns the cube of side ``voxel_size`` centered
    at ``v * voxel_size``.
    """
    a = starts / voxel_size + 0.5
    b = ends / voxel_size + 0.5
    delta = b - a
    lo = np.floor(np.minimum(a, b))
    span = int(np.ceil(np.abs(delta).max())) + 1 if len(a) else 1
    j = np.arange(span, dtype=np.float64)
    ts = [np.zeros((len(a), 1)), np.ones((len(a), 1))]
    for k in range(3):
        planes = lo[:, k : k + 1] + 1.0 + j
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (planes - a[:, k : k + 1]) / delta[:, k : k + 1]
        ok = (planes <= np.maximum(a[:, k], b[:, k])[:, None]) & (delta[:, k : k + 1] != 0)
        ts.append(np.where(ok & (t > 0) & (t < 1), t, np.inf))
    t = np.sort(np.concatenate(ts, axis=1), axis=1)
    t0, t1 = t[:, :-1], t[:, 1:]
    keep = (t1 <= 1.0) & (t1 > t0)
    seg, col = np.nonzero(keep)
    tm = 0.5 * (t0[seg, col] + t1[seg, col])
    vox = np.floor(a[seg] + tm[:, None] * delta[seg]).astype(np.int64)
    return seg, vox


def integrate_frame(
    images: ScanImages,
    store: VoxelStore,
    cfg: IntegratorConfig | None = None,
    pose=None,
    frame: int = 0,
) -> FrameReport:
    """Fuse one scan into the store.

    Every voxel cell crossed by the segment of half-length tau around each
    measured point, and whose center projects inside that band, receives one
    contribution. Contributions are summed per voxel before being merged into
    the stored running average.
    """
    t_start = time.perf_counter()
    cfg = cfg or IntegratorConfig()
    pose = pose if pose is not None else images.pose
    tau = cfg.truncation if cfg.truncation is not None else store.config.truncation
    nu = store.config.voxel_size
    non_proj = cfg.mode == NON_PROJECTIVE
    if non_proj and images.normals is None:
        raise ValueError("non-projective integration needs the normal image")

    valid = (images.depth > 0) & (images.depth <= cfg.max_range)
    has_normal = images.normal_valid & valid
    if cfg.drop_without_normal:
        valid &= has_normal
    if not valid.any():
        return FrameReport(0, 0, time.perf_counter() - t_start, frame)

    origin = pose.translation
    q = pose.apply(images.points[valid])
    ray = q - origin
    rng = np.linalg.norm(ray, axis=1)
    r_hat = ray / rng[:, None]
    if images.normals is not None:
        normals = images.normals[valid] @ pose.rotation.T
    else:
        normals = np.full_like(q, np.nan)
    ray_has_normal = has_normal[valid]

    seg, vox = band_voxels(q - tau * r_hat, q + tau * r_hat, nu)
    centers = vox * nu
    psi = rng[seg] - np.einsum("ij,ij->i", centers - origin, r_hat[seg])
    inband = np.abs(psi) <= tau
    seg, vox, psi = seg[inband], vox[inband], psi[inband]
    if not seg.size:
        return FrameReport(0, 0, time.perf_counter() - t_start, frame)

    bc, lin = voxel_to_block(vox)
    ubc, inv = unique_rows(bc, return_inverse=True)
    inv = inv.reshape(-1)
    slots, new_blocks = store.allocate_blocks(ubc)
    flat = slots[inv] * VOXELS_PER_BLOCK + lin

    w = observation_weight(psi, tau, cfg.min_weight_clamp)
    n_meas = normals[seg]
    with_n = ray_has_normal[seg]
    d = psi.copy()
    if non_proj and with_n.any():
        idx = np.flatnonzero(with_n)
        f = flat[idx]
        old_w = store.flat_weight[f]
        g = store.flat_gradient[f].astype(np.float64)
        g_ok = (old_w > 0) & (np.linalg.norm(g, axis=1) > 0.5)
        n = n_meas[idx]
        g = np.where(g_ok[:, None], g, n)
        cos_t = np.clip(-np.einsum("ij,ij->i", r_hat[seg[idx]], g), -1.0, 1.0)
        cos_a = np.clip(np.einsum("ij,ij->i", g, n), -1.0, 1.0)
        d[idx] = nonprojective_distance(psi[idx], np.arccos(cos_t), np.arccos(cos_a), cfg.alpha_epsilon)

    gamma = truncate(d, tau)
    uflat, uinv = np.unique(flat, return_inverse=True)
    uinv = uinv.reshape(-1)
    m = len(uflat)
    sw = np.bincount(uinv, weights=w, minlength=m)
    swd = np.bincount(uinv, weights=w * gamma, minlength=m)
    wn = np.where(with_n[:, None], w[:, None] * np.nan_to_num(n_meas), 0.0)
    swn = np.stack([np.bincount(uinv, weights=wn[:, k], minlength=m) for k in range(3)], axis=1)

    old_d = store.flat_distance[uflat].astype(np.float64)
    old_w = store.flat_weight[uflat].astype(np.float64)
    old_g = store.flat_gradient[uflat].astype(np.float64)
    w_sum = old_w + sw
    new_d = (old_w * old_d + swd) / w_sum
    acc = old_w[:, None] * old_g + swn
    norm = np.linalg.norm(acc, axis=1)
    good = norm > 1e-12
    new_g = old_g.copy()
    new_g[good] = acc[good] / norm[good, None]

    store.flat_distance[uflat] = new_d
    store.flat_weight[uflat] = w_sum
    store.flat_gradient[uflat] = new_g
    store.dirty.update(map(tuple, ubc.tolist()))
    return FrameReport(m, new_blocks, time.perf_counter() - t_start, frame)

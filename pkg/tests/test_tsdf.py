import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semvox.projection import Pose, PosedCloud, ProjectionModel, compute_normal_image, pixel_directions, project_cloud
from semvox.synthetic import Plane, SceneSpec, flat_world, render_scan, yaw_pose
from semvox.tsdf import (
    FrameReport,
    IntegratorConfig,
    band_voxels,
    fuse_voxel,
    integrate_frame,
    nonprojective_distance,
    observation_weight,
    projective_distance,
    truncate,
)
from semvox.voxel_store import MapConfig, VoxelStore, world_to_voxel

LIDAR = ProjectionModel()


def _distance_oracle(psi, theta, alpha, eps=1e-2):
    if alpha < eps:
        return abs(math.cos(theta)) * psi
    mag = abs((math.cos(alpha) - 1) * math.sin(theta) / math.sin(alpha)) + abs(math.cos(theta) * psi)
    return math.copysign(mag, psi) if psi != 0 else 0.0


@pytest.mark.parametrize(
    "psi, theta, alpha, want",
    # 0.174766...: 0.0881635 + 0.0866025, frozen from a 30-digit mpmath evaluation
    [(0.2, 0.0, 0.0, 0.2), (0.2, math.radians(60), 0.0, 0.1), (0.1, math.radians(30), math.radians(20), 0.17476603073267635)],
)
def test_nonprojective_examples(psi, theta, alpha, want):
    assert nonprojective_distance(psi, theta, alpha) == pytest.approx(want, abs=1e-12)


@given(st.floats(-1, 1), st.floats(0, math.pi), st.floats(0, math.pi - 1e-3))
def test_nonprojective_matches_oracle_and_sign(psi, theta, alpha):
    d = nonprojective_distance(psi, theta, alpha)
    assert d == pytest.approx(_distance_oracle(psi, theta, alpha), abs=1e-9)
    assert np.sign(d) == np.sign(psi)


@given(st.floats(-1, 1), st.floats(0, math.pi))
def test_flat_branch_below_threshold(psi, theta):
    assert nonprojective_distance(psi, theta, 0.005) == pytest.approx(abs(math.cos(theta)) * psi, abs=1e-12)


def test_curved_branch_is_continuous_at_threshold():
    lo = nonprojective_distance(0.3, 0.7, 1e-2 - 1e-12)
    hi = nonprojective_distance(0.3, 0.7, 1e-2)
    # the jump is the offset term tan(alpha / 2) * sin(theta)
    assert abs(hi - lo) == pytest.approx(math.tan(5e-3) * math.sin(0.7), abs=1e-9)


def test_projective_distance_examples():
    o = np.zeros(3)
    q = np.array([2.0, 0, 0])
    assert projective_distance(q, o, q) == pytest.approx(0.0)
    assert projective_distance([1.8, 0, 0], o, q) == pytest.approx(0.2)
    assert projective_distance([2.3, 0, 0], o, q) == pytest.approx(-0.3)


def test_projective_distance_off_ray_geometry():
    # voxel at perpendicular offset h from the ray: foot of perpendicular is at s along the ray
    o = np.array([1.0, 2.0, 0.5])
    r_hat = np.array([1.0, 1.0, 1.0]) / math.sqrt(3)
    q = o + 4.0 * r_hat
    perp = np.array([1.0, -1.0, 0.0]) / math.sqrt(2)
    x = o + 3.7 * r_hat + 0.25 * perp
    assert projective_distance(x, o, q) == pytest.approx(0.3, abs=1e-12)


def test_projective_distance_rejects_zero_range():
    with pytest.raises(ValueError):
        projective_distance([1, 0, 0], [0, 0, 0], [0, 0, 0])


def test_weight_examples():
    assert observation_weight(0.5, 0.5) == pytest.approx(1.0)
    assert observation_weight(0.0, 0.5) == pytest.approx(0.5)
    assert observation_weight(-0.5, 0.5) == pytest.approx(0.01)
    assert observation_weight(-0.5, 0.5, 0.05) == pytest.approx(0.05)


def test_truncation_examples():
    assert truncate(0.5, 0.3) == pytest.approx(0.3)
    assert truncate(-0.5, 0.3) == pytest.approx(-0.3)


def test_fuse_voxel_examples():
    d, w, g = fuse_voxel(0.0, 0.0, np.zeros(3), 0.1, 1.0, np.array([0, 0, 1.0]), 0.5)
    assert (d, w) == (pytest.approx(0.1), 1.0)
    assert np.allclose(g, [0, 0, 1])
    d, w, g = fuse_voxel(0.2, 2.0, np.array([1.0, 0, 0]), 0.5, 1.0, np.array([0, 1.0, 0]), 0.3)
    assert d == pytest.approx(0.7 / 3, abs=1e-12)
    assert w == 3.0
    assert np.allclose(g, np.array([2.0, 1.0, 0]) / math.sqrt(5))
    with pytest.raises(ValueError):
        fuse_voxel(0.0, 1.0, np.zeros(3), 0.1, -1.0, np.zeros(3), 0.5)


@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(0, 1)), min_size=1, max_size=20))
def test_fuse_keeps_bounds_and_monotone_weight(obs):
    tau = 0.4
    d, w, g = 0.0, 0.0, np.zeros(3)
    for di, wi in obs:
        w_old = w
        d, w, g = fuse_voxel(d, w, g, di, wi, np.array([0.0, 0.6, 0.8]), tau)
        assert w >= w_old
        if w > 0:
            assert abs(d) <= tau + 1e-12


def _segment_box_overlap(a, b, lo, hi):
    """Slab test: does the open segment a->b pass through the interior of box [lo, hi]?"""
    t0, t1 = 0.0, 1.0
    d = b - a
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if a[k] <= lo[k] or a[k] >= hi[k]:
                return False
            continue
        ta, tb = (lo[k] - a[k]) / d[k], (hi[k] - a[k]) / d[k]
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
    return t1 - t0 > 1e-9


def test_band_voxels_matches_slab_oracle():
    rng = np.random.default_rng(11)
    nu = 0.1
    a = rng.uniform(-1, 1, size=(60, 3))
    b = a + rng.normal(size=(60, 3)) * 0.4
    seg, vox = band_voxels(a, b, nu)
    for i in range(len(a)):
        got = {tuple(v) for v in vox[seg == i]}
        lo = np.floor(np.minimum(a[i], b[i]) / nu + 0.5).astype(int) - 1
        hi = np.floor(np.maximum(a[i], b[i]) / nu + 0.5).astype(int) + 1
        want = set()
        for v in np.stack(np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(lo, hi)], indexing="ij"), -1).reshape(-1, 3):
            if _segment_box_overlap(a[i], b[i], (v - 0.5) * nu, (v + 0.5) * nu):
                want.add(tuple(v))
        assert got == want


def _single_ray_images(direction_pixel, rng_m, normal=None):
    u, v = direction_pixel
    d = pixel_directions(u, v, LIDAR)
    img = project_cloud(PosedCloud((d * rng_m)[None]), LIDAR)
    img.normals = np.full(img.depth.shape + (3,), np.nan)
    if normal is not None:
        img.normals[v, u] = normal
    return img, d


def test_single_ray_band():
    nu, tau = 0.1, 0.5
    store = VoxelStore(MapConfig(voxel_size=nu, truncation=tau))
    img, d = _single_ray_images((100, 40), 2.0)
    rep = integrate_frame(img, store, IntegratorConfig(mode="projective"))
    assert rep.updated_voxels > 0 and rep.new_blocks > 0
    q = 2.0 * d
    # brute-force march: voxels containing samples of the band segment
    ts = np.linspace(-tau + 1e-6, tau - 1e-6, 4001)
    pts = q[None] + ts[:, None] * d[None]
    for v in np.unique(world_to_voxel(pts, nu), axis=0):
        c = v * nu
        psi = 2.0 - c @ d
        view = store.lookup_voxel(v)
        if abs(psi) <= tau:
            assert view is not None and view.weight > 0
    hit = store.lookup_voxel(world_to_voxel(q, nu))
    assert abs(hit.distance) <= nu


def test_empty_frame_leaves_store_unchanged():
    store = VoxelStore(MapConfig(voxel_size=0.1))
    img = project_cloud(PosedCloud(np.zeros((0, 3))), LIDAR)
    rep = integrate_frame(compute_normal_image(img, LIDAR), store)
    assert (rep.updated_voxels, rep.new_blocks) == (0, 0)
    assert len(store) == 0


@pytest.fixture(scope="module")
def ground_frames():
    sc = SceneSpec([Plane(0.0, -10, 10, -10, 10, "road")], [yaw_pose(0, 0, 1.5, 0), yaw_pose(0.7, 0.3, 1.5, 30)])
    return sc, [compute_normal_image(project_cloud(render_scan(sc, i), sc.lidar), sc.lidar) for i in range(2)]


def test_repeated_frame_is_fixed_point(ground_frames):
    _, imgs = ground_frames
    store = VoxelStore(MapConfig(voxel_size=0.1, truncation=0.5))
    integrate_frame(imgs[0], store, IntegratorConfig(mode="projective"))
    n = len(store)
    d1 = store.flat_distance.copy()
    w1 = store.flat_weight.copy()
    integrate_frame(imgs[0], store, IntegratorConfig(mode="projective"))
    assert len(store) == n
    assert np.allclose(store.flat_distance, d1, atol=1e-6)
    assert np.allclose(store.flat_weight, 2 * w1, rtol=1e-6)


@pytest.mark.parametrize("mode", ["projective", "non_projective"])
def test_pixel_order_insensitive(ground_frames, mode):
    sc, _ = ground_frames
    cloud = render_scan(sc, 1)
    perm = np.random.default_rng(0).permutation(len(cloud.points))
    stores = []
    for pts in (cloud.points, cloud.points[perm]):
        store = VoxelStore(MapConfig(voxel_size=0.1, truncation=0.5))
        img = compute_normal_image(project_cloud(PosedCloud(pts, cloud.pose), sc.lidar), sc.lidar)
        integrate_frame(img, store, IntegratorConfig(mode=mode))
        stores.append(store)
    a, b = stores
    assert np.array_equal(a.block_coords(), b.block_coords())
    assert np.max(np.abs(a.flat_distance - b.flat_distance)) <= 1e-5


def test_invariants_after_frames(ground_frames):
    _, imgs = ground_frames
    tau = 0.5
    store = VoxelStore(MapConfig(voxel_size=0.1, truncation=tau))
    w_prev = None
    for img in imgs + imgs:
        integrate_frame(img, store)
        w = store.flat_weight
        if w_prev is not None:
            assert np.all(w[: len(w_prev)] >= w_prev)
        w_prev = w.copy()
    obs = store.flat_weight > 0
    assert np.all(np.abs(store.flat_distance[obs]) <= tau + 1e-6)
    gn = np.linalg.norm(store.flat_gradient[obs], axis=1)
    assert np.all((gn == 0) | (np.abs(gn - 1) <= 1e-6))


def test_head_on_modes_agree():
    out = []
    for mode in ("projective", "non_projective"):
        img, d = _single_ray_images((256, 26), 3.0)
        img.normals[26, 256] = -d
        store = VoxelStore(MapConfig(voxel_size=0.1, truncation=0.5))
        integrate_frame(img, store, IntegratorConfig(mode=mode))
        out.append(store)
    a, b = out
    assert np.array_equal(a.block_coords(), b.block_coords())
    assert np.max(np.abs(a.flat_distance - b.flat_distance)) <= 1e-6


def test_plane_zero_crossing_within_voxel(ground_frames):
    _, imgs = ground_frames
    nu = 0.1
    store = VoxelStore(MapConfig(voxel_size=nu, truncation=0.5))
    for img in imgs:
        integrate_frame(img, store)
    checked = 0
    for x in np.arange(-80, 81, 7):
        for y in np.arange(-80, 81, 7):
            col = np.array([[x, y, z] for z in range(-5, 6)])
            dist, weight, present = store.gather(col)
            ok = present & (weight > 0)
            d, z = dist[ok], col[ok, 2]
            s = np.flatnonzero(((d[:-1] > 0) != (d[1:] > 0)) & (np.diff(z) == 1))
            if not len(s):
                continue
            for i in s:
                z0 = z[i] * nu + nu * d[i] / (d[i] - d[i + 1])
                assert abs(z0) <= nu
            checked += 1
    assert checked > 100


def test_nonprojective_requires_normals(ground_frames):
    sc, _ = ground_frames
    img = project_cloud(render_scan(sc, 0), sc.lidar)
    with pytest.raises(ValueError):
        integrate_frame(img, VoxelStore(MapConfig(voxel_size=0.1)))
    rep = integrate_frame(img, VoxelStore(MapConfig(voxel_size=0.1)), IntegratorConfig(mode="projective"))
    assert rep.updated_voxels > 0


def test_drop_without_normal_skips_rays():
    img, _ = _single_ray_images((100, 40), 2.0)
    store = VoxelStore(MapConfig(voxel_size=0.1))
    rep = integrate_frame(img, store, IntegratorConfig(drop_without_normal=True))
    assert rep.updated_voxels == 0 and len(store) == 0
    rep = integrate_frame(img, store, IntegratorConfig())
    assert rep.updated_voxels > 0


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(mode="bogus")
    with pytest.raises(ValueError):
        IntegratorConfig(alpha_epsilon=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(truncation=-1.0)


def test_frame_report_json():
    rec = json.loads(FrameReport(12, 3, 0.0015, frame=4).to_json())
    assert rec == {"frame": 4, "updated_voxels": 12, "new_blocks": 3, "labeled_voxels": 0, "elapsed_ms": 1.5}


def test_observed_voxel_count_after_single_ray():
    store = VoxelStore(MapConfig(voxel_size=0.1, truncation=0.5))
    img, d = _single_ray_images((10, 30), 4.0)
    rep = integrate_frame(img, store, IntegratorConfig(mode="projective"))
    assert store.stats()[1] == rep.updated_voxels >= 1

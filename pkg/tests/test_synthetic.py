import math

import numpy as np
import pytest

from semvox.projection import Pose, ProjectionModel, back_project, pixel_coords, project_cloud
from semvox.synthetic import (
    Box,
    CameraModel,
    Plane,
    SceneSpec,
    flat_world,
    format_scene,
    grass_strip_world,
    ground_truth_cloud,
    parse_scene,
    render_labels,
    render_scan,
    yaw_pose,
)


def _plane_scene(sigma=0.0, flip=0.0, lidar=None, camera=None):
    return SceneSpec(
        [Plane(0.0, -100, 100, -100, 100, "road")], [yaw_pose(0, 0, 1.0, 0.0)],
        lidar or ProjectionModel(), camera or CameraModel(), sigma, flip, seed=3,
    )


def test_plane_ranges_are_exact():
    sc = _plane_scene()
    cloud = render_scan(sc, 0)
    world = cloud.pose.apply(cloud.points)
    assert len(world) > 1000
    assert np.max(np.abs(world[:, 2])) <= 1e-9
    # analytic range 1 / cos of the angle to straight down
    r = np.linalg.norm(cloud.points, axis=1)
    cos_down = -cloud.points[:, 2] / r
    assert np.allclose(r, 1.0 / cos_down, rtol=1e-12)


def test_parallel_ray_misses():
    p = Plane(0.0, -1, 1, -1, 1, "road")
    t = p.intersect(np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]))
    assert np.isinf(t[0])


def test_range_noise_statistics():
    # dense LiDAR to get about 1e5 returns
    lidar = ProjectionModel(width=2048, height_px=128, delta_theta=math.radians(0.35), theta0=math.radians(90))
    clean = render_scan(_plane_scene(0.0, lidar=lidar), 0)
    noisy = render_scan(_plane_scene(0.02, lidar=lidar), 0)
    res = np.linalg.norm(noisy.points, axis=1) - np.linalg.norm(clean.points, axis=1)
    assert len(res) >= 1e5
    assert abs(res.mean()) < 3 * 0.02 / math.sqrt(len(res))
    assert res.std() == pytest.approx(0.02, rel=0.02)


def test_labels_without_flips_and_sky():
    sc = flat_world(n_poses=4)
    img = render_labels(sc, 0)
    ls = sc.labels
    assert set(np.unique(img.labels)) <= {ls.index("road"), ls.index("building"), ls.unlabeled_id}
    # upward pixels see sky
    cam = CameraModel(pitch=-60.0)
    sky = render_labels(_plane_scene(camera=cam), 0)
    assert np.all(sky.labels[0] == ls.unlabeled_id)
    assert np.all(img.confidence == 0.9)


def test_flip_rate_statistics():
    cam = CameraModel(width=1000, height=1000, fx=500, fy=500, cx=500, cy=500, pitch=89.0)
    sc = _plane_scene(flip=0.3, camera=cam)
    img = render_labels(sc, 0)
    road = sc.labels.index("road")
    assert img.labels.size == 10**6
    assert not np.any(img.labels == sc.labels.unlabeled_id)
    frac = np.mean(img.labels != road)
    assert abs(frac - 0.30) <= 0.01
    # flips land uniformly on the other real classes
    other = img.labels[img.labels != road]
    counts = np.bincount(other, minlength=len(sc.labels))
    real = [i for i in range(len(sc.labels)) if i not in (road, sc.labels.unlabeled_id)]
    assert counts[real].min() > 0.8 * counts[real].mean()


def test_ground_truth_density():
    sc = SceneSpec([Plane(0.0, 0, 1, 0, 1, "road")], [Pose()])
    g = ground_truth_cloud(sc, 100)
    assert len(g) == 100
    assert np.all(g.labels == sc.labels.index("road"))


def test_ground_truth_box_area_ratio():
    a = Box(0, 0, 0, 1, 1, 1, "building")
    b = Box(5, 5, 0, 7, 8, 1.5, "vegetation")
    sc = SceneSpec([a, b], [Pose()])
    g = ground_truth_cloud(sc, 400)
    na = np.count_nonzero(g.labels == sc.labels.index("building"))
    nb = np.count_nonzero(g.labels == sc.labels.index("vegetation"))
    assert (nb / na) == pytest.approx(b.area() / a.area(), rel=0.05)


def test_ground_truth_skips_hidden_surfaces():
    sc = flat_world(n_poses=2)
    g = ground_truth_cloud(sc, 100)
    # no plane samples inside boxes and no box bottoms on the ground
    box = sc.primitives[1]
    inside = np.all((g.points > box.lo + 1e-6) & (g.points < box.hi - 1e-6), axis=1)
    assert not inside.any()
    assert not np.any((g.labels == sc.labels.index("building")) & (g.points[:, 2] == 0.0))


def test_determinism():
    a = flat_world(n_poses=3, range_sigma=0.02, flip_rate=0.2, seed=5)
    b = flat_world(n_poses=3, range_sigma=0.02, flip_rate=0.2, seed=5)
    for i in range(3):
        assert render_scan(a, i).points.tobytes() == render_scan(b, i).points.tobytes()
        assert render_labels(a, i).labels.tobytes() == render_labels(b, i).labels.tobytes()
    assert ground_truth_cloud(a, 50).points.tobytes() == ground_truth_cloud(b, 50).points.tobytes()
    c = flat_world(n_poses=3, range_sigma=0.02, seed=6)
    assert render_scan(a, 1).points.tobytes() != render_scan(c, 1).points.tobytes()


def test_scans_round_trip_through_projection():
    sc = flat_world(n_poses=3)
    cloud = render_scan(sc, 1)
    m = sc.lidar
    u, v, r = pixel_coords(cloud.points, m)
    back = back_project(u, v, r, m)
    assert np.max(np.abs(back - cloud.points)) <= 1e-6
    img = project_cloud(cloud, m)
    assert img.dropped == 0 and np.count_nonzero(img.valid) == len(cloud.points)


def test_scene_text_round_trip():
    for sc in (flat_world(n_poses=5, range_sigma=0.01, flip_rate=0.1, seed=2), grass_strip_world(n_poses=3)):
        text = format_scene(sc)
        back = parse_scene(text)
        assert [type(p) for p in back.primitives] == [type(p) for p in sc.primitives]
        assert back.primitives == sc.primitives
        for p, q in zip(back.trajectory, sc.trajectory):
            assert np.allclose(p.rotation, q.rotation, atol=1e-12)
            assert np.allclose(p.translation, q.translation, atol=1e-12)
        assert (back.range_sigma, back.flip_rate, back.seed) == (sc.range_sigma, sc.flip_rate, sc.seed)
        assert back.camera == sc.camera
        assert (back.lidar.width, back.lidar.height_px) == (sc.lidar.width, sc.lidar.height_px)
        assert back.lidar.theta0 == pytest.approx(sc.lidar.theta0, rel=1e-14)
        assert back.lidar.delta_theta == pytest.approx(sc.lidar.delta_theta, rel=1e-14)
        assert format_scene(parse_scene(format_scene(back))) == format_scene(back)


def test_scene_validation():
    with pytest.raises(ValueError):
        SceneSpec([], [Pose()])
    with pytest.raises(ValueError):
        SceneSpec([Plane(0, 0, 1, 0, 1, "road")], [Pose()], flip_rate=1.0)
    with pytest.raises(ValueError):
        parse_scene("plane 0 0 1 0 1 road\nwobble 3\n")
    with pytest.raises(ValueError):
        parse_scene("plane 0 0 1 road\n")

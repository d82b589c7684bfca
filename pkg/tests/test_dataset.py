import logging

import numpy as np
import pytest

from semvox.dataset import (
    Dataset,
    DatasetError,
    LabelEntry,
    RunConfig,
    load_dataset,
    read_kitti_labels,
    read_kitti_scan,
    read_label_index,
    read_lidar_cfg,
    read_poses,
    thread_count,
    write_dataset,
    write_kitti_scan,
    write_label_index,
    write_lidar_cfg,
    write_poses,
)
from semvox.projection import Pose, ProjectionModel
from semvox.semantics import Intrinsics, SemanticConfig
from semvox.synthetic import flat_world, render_labels, render_scan
from semvox.traversability import TraversabilityConfig
from semvox.tsdf import IntegratorConfig


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    scene = flat_world(n_poses=4, flip_rate=0.1, seed=3)
    write_dataset(scene, root, gt_density=25)
    return root, scene


def _pose(rng):
    q = rng.normal(size=4)
    return Pose.from_quaternion(rng.normal(size=3), q / np.linalg.norm(q))


def test_kitti_scan_and_label_io(tmp_path):
    pts = np.random.default_rng(0).normal(size=(100, 3)).astype(np.float32)
    write_kitti_scan(tmp_path / "a.bin", pts)
    assert np.array_equal(read_kitti_scan(tmp_path / "a.bin"), pts.astype(np.float64))
    raw = np.array([5 | (7 << 16), 3], dtype="<u4")
    raw.tofile(tmp_path / "a.label")
    assert read_kitti_labels(tmp_path / "a.label").tolist() == [5, 3]
    (tmp_path / "bad.bin").write_bytes(b"\0" * 20)
    with pytest.raises(DatasetError):
        read_kitti_scan(tmp_path / "bad.bin")


def test_pose_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    poses = [_pose(rng) for _ in range(5)]
    write_poses(tmp_path / "p.txt", np.arange(5) * 0.1, poses)
    stamps, back = read_poses(tmp_path / "p.txt")
    assert np.allclose(stamps, np.arange(5) * 0.1)
    for a, b in zip(poses, back):
        assert np.allclose(a.rotation, b.rotation, atol=1e-12)
        assert np.array_equal(a.translation, b.translation)
    (tmp_path / "bad.txt").write_text("0 1 2 3\n")
    with pytest.raises(DatasetError, match="expected 8 fields"):
        read_poses(tmp_path / "bad.txt")


def test_label_index_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    e = [LabelEntry("labels/000000.png", np.float64(0.25), Intrinsics(80.0, 81.0, 79.5, 60.0), _pose(rng))]
    write_label_index(tmp_path / "i.txt", e)
    assert "np." not in (tmp_path / "i.txt").read_text()
    back = read_label_index(tmp_path / "i.txt")[0]
    assert back.image_path == e[0].image_path and back.timestamp == 0.25
    assert back.intrinsics == e[0].intrinsics


def test_lidar_cfg_round_trip(tmp_path):
    m = ProjectionModel(width=1024, height_px=32, delta_theta=0.02, theta0=1.1, scale=128.0, min_range=0.5)
    write_lidar_cfg(tmp_path / "l.cfg", m)
    b = read_lidar_cfg(tmp_path / "l.cfg")
    assert (b.width, b.height_px, b.scale, b.min_range) == (1024, 32, 128.0, 0.5)
    assert b.theta0 == pytest.approx(1.1, rel=1e-14) and b.delta_theta == pytest.approx(0.02, rel=1e-14)


def test_loader_round_trip(small_dataset):
    root, scene = small_dataset
    frames = list(load_dataset(root))
    assert len(frames) == 4
    for i, (cloud, img) in enumerate(frames):
        ref = render_scan(scene, i)
        assert np.allclose(cloud.points, ref.points.astype(np.float32), atol=0)
        assert np.allclose(cloud.pose.rotation, ref.pose.rotation, atol=1e-12)
        assert np.array_equal(img.labels, render_labels(scene, i).labels)
        assert img.max_depth == 30.0
    # prefetching does not change order or content
    plain = list(load_dataset(root, prefetch=False))
    assert all(np.array_equal(a[0].points, b[0].points) for a, b in zip(frames, plain))
    sub = list(load_dataset(root, frames=(1, 3)))
    assert len(sub) == 2 and np.array_equal(sub[0][0].points, frames[1][0].points)


def test_frames_in_timestamp_order(tmp_path):
    root = tmp_path / "d"
    (root / "scans").mkdir(parents=True)
    for i in range(3):
        write_kitti_scan(root / "scans" / f"{i:06d}.bin", np.full((2, 3), float(i + 1)))
    write_poses(root / "poses.txt", [0.2, 0.0, 0.1], [Pose()] * 3)
    out = [c.points[0, 0] for c, _ in load_dataset(root)]
    assert out == [2.0, 3.0, 1.0]


def test_missing_labels_gives_geometry_only(tmp_path, caplog):
    scene = flat_world(n_poses=2)
    write_dataset(scene, tmp_path, gt_density=4)
    import shutil

    shutil.rmtree(tmp_path / "labels")
    with caplog.at_level(logging.INFO):
        frames = list(load_dataset(tmp_path))
    assert all(img is None for _, img in frames)
    assert "geometry-only" in caplog.text


def test_unmatched_label_timestamps_are_absent(tmp_path):
    scene = flat_world(n_poses=2)
    write_dataset(scene, tmp_path, gt_density=4)
    e = read_label_index(tmp_path / "labels_index.txt")
    e[1].timestamp += 0.06
    write_label_index(tmp_path / "labels_index.txt", e)
    imgs = [img for _, img in load_dataset(tmp_path)]
    assert imgs[0] is not None and imgs[1] is None


def test_scan_pose_count_mismatch(tmp_path):
    (tmp_path / "scans").mkdir()
    for i in range(3):
        write_kitti_scan(tmp_path / "scans" / f"{i:06d}.bin", np.ones((1, 3)))
    write_poses(tmp_path / "poses.txt", [0.0, 0.1], [Pose(), Pose()])
    with pytest.raises(DatasetError, match="3 scans, 2 poses"):
        Dataset(tmp_path)


def test_missing_poses_is_fatal(tmp_path):
    (tmp_path / "scans").mkdir()
    with pytest.raises(DatasetError, match="poses.txt"):
        Dataset(tmp_path)
    with pytest.raises(DatasetError):
        Dataset(tmp_path / "nope")


def test_out_of_range_label_image(small_dataset, tmp_path):
    import shutil

    root, _ = small_dataset
    shutil.copytree(root, tmp_path / "c")
    from semvox.dataset import write_label_png

    write_label_png(tmp_path / "c" / "labels" / "000000.png", np.full((120, 160), 200))
    with pytest.raises(DatasetError, match="out of range"):
        Dataset(tmp_path / "c").frame(0)


def test_confidence_and_probability_images(small_dataset, tmp_path):
    import shutil

    from semvox.dataset import write_label_png

    root, scene = small_dataset
    shutil.copytree(root, tmp_path / "c")
    k = len(scene.labels)
    write_label_png(tmp_path / "c" / "labels" / "000001_conf.png", np.full((120, 160), 204))
    probs = np.random.default_rng(0).dirichlet(np.ones(k), size=(120, 160))
    np.save(tmp_path / "c" / "labels" / "000001_probs.npy", probs)
    ds = Dataset(tmp_path / "c")
    img = ds.frame(1).labels
    assert np.allclose(img.confidence, 0.8)
    assert np.array_equal(img.probabilities, probs)
    assert ds.frame(0).labels.probabilities is None
    np.save(tmp_path / "c" / "labels" / "000001_probs.npy", probs[..., :2])
    with pytest.raises(DatasetError, match="expected shape"):
        ds.frame(1)


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(
        frames=(2, 9), max_depth=12.5,
        integrator=IntegratorConfig(mode="projective", truncation=0.4, drop_without_normal=True),
        semantics=SemanticConfig(bayes=False, occlusion="surrogate", keep_unresolved=True, unlabeled_id=4),
        traversability=TraversabilityConfig(radius=0.3, traversable_labels=frozenset({0, 2})),
        lidar=ProjectionModel(width=256),
    )
    text = cfg.to_text()
    back = RunConfig.from_text(text)
    assert back.to_text() == text
    assert back.integrator == cfg.integrator and back.semantics == cfg.semantics
    assert back.traversability == cfg.traversability and back.frames == (2, 9)
    # comments and spacing do not matter
    noisy = "# run file\n" + text.replace(" = ", "=").replace("\n[", "\n\n; section\n[")
    assert RunConfig.from_text(noisy).to_text() == text


def test_run_config_errors(tmp_path):
    with pytest.raises(ValueError, match="unknown config section"):
        RunConfig.from_text("[bogus]\na = 1\n")
    with pytest.raises(ValueError, match="unknown key"):
        RunConfig.from_text("[traversability]\nspeed = 3\n")
    with pytest.raises(ValueError):
        RunConfig.from_text("[map]\nvoxel_size = -1\n")
    (tmp_path / "run.cfg").write_text("[run]\ndataset = missing\n")
    with pytest.raises(DatasetError):
        RunConfig.load(tmp_path / "run.cfg")


def test_written_run_config_loads(small_dataset):
    root, scene = small_dataset
    cfg = RunConfig.load(root / "run.cfg")
    assert cfg.dataset == root / "."
    assert cfg.map.num_labels == len(scene.labels)
    assert cfg.semantics.unlabeled_id == scene.labels.unlabeled_id
    assert cfg.max_depth == scene.camera.max_depth


def test_thread_count(monkeypatch):
    monkeypatch.setenv("SEMVOX_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("SEMVOX_THREADS", "0")
    assert thread_count() == 1
    monkeypatch.setenv("SEMVOX_THREADS", "many")
    with pytest.raises(DatasetError):
        thread_count()
    monkeypatch.delenv("SEMVOX_THREADS")
    assert thread_count() >= 1

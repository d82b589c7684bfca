"""Dataset layout, readers/writers and the run configuration file.

A dataset directory holds::

    scans/NNNNNN.bin        float32 x y z intensity per point, sensor frame
    poses.txt               "timestamp tx ty tz qx qy qz qw", one line per scan
    labels/NNNNNN.png       class-id image (optional), NNNNNN_conf.png confidence,
                            NNNNNN_probs.npy per-pixel class distribution (H, W, K)
    labels_index.txt        "image_path timestamp fx fy cx cy tx ty tz qx qy qz qw"
    lidar.cfg               [lidar] section of the projection model
    labelset.cfg            "name r g b" per class
"""

from __future__ import annotations

import configparser
import logging
import math
import os
import queue
import threading
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .projection import PosedCloud, Pose, ProjectionModel
from .semantics import Intrinsics, LabelImage, LabelSet, SemanticConfig
from .traversability import TraversabilityConfig
from .tsdf import IntegratorConfig
from .voxel_store import MapConfig

log = logging.getLogger(__name__)

LABEL_MATCH_TOLERANCE = 0.05  # seconds


class DatasetError(RuntimeError):
    """Malformed or inconsistent dataset on disk."""


def thread_count() -> int:
    """Worker cap from SEMVOX_THREADS, else the number of CPUs."""
    env = os.environ.get("SEMVOX_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise DatasetError(f"SEMVOX_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


# -- low level readers ------------------------------------------------------------------


def read_kitti_scan(path) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size % 4:
        raise DatasetError(f"{path}: size is not a multiple of 4 floats")
    return data.reshape(-1, 4)[:, :3].astype(np.float64)


def write_kitti_scan(path, points: np.ndarray, intensity=None):
    out = np.zeros((len(points), 4), dtype="<f4")
    out[:, :3] = points
    if intensity is not None:
        out[:, 3] = intensity
    out.tofile(path)


def read_kitti_labels(path) -> np.ndarray:
    """Per-point semantic ids from a KITTI-style .label file (lower 16 bits)."""
    return (np.fromfile(path, dtype="<u4") & 0xFFFF).astype(np.int64)


def _parse_pose_fields(vals) -> Pose:
    tx, ty, tz, qx, qy, qz, qw = vals
    return Pose.from_quaternion([tx, ty, tz], [qx, qy, qz, qw])


def _pose_fields(pose: Pose) -> str:
    q = pose.quaternion()
    return " ".join(repr(float(x)) for x in (*pose.translation, *q))


def read_poses(path) -> tuple[np.ndarray, list[Pose]]:
    stamps, poses = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DatasetError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            vals = [float(x) for x in parts]
            stamps.append(vals[0])
            poses.append(_parse_pose_fields(vals[1:]))
    return np.asarray(stamps), poses


def write_poses(path, stamps, poses):
    with open(path, "w") as f:
        for t, p in zip(stamps, poses):
            f.write(f"{float(t)!r} {_pose_fields(p)}\n")


@dataclass
class LabelEntry:
    image_path: str
    timestamp: float
    intrinsics: Intrinsics
    pose: Pose


def read_label_index(path) -> list[LabelEntry]:
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 13:
                raise DatasetError(f"{path}:{lineno}: expected 13 fields, got {len(parts)}")
            v = [float(x) for x in parts[1:]]
            entries.append(LabelEntry(parts[0], v[0], Intrinsics(*v[1:5]), _parse_pose_fields(v[5:])))
    return entries


def write_label_index(path, entries: list[LabelEntry]):
    with open(path, "w") as f:
        for e in entries:
            k = e.intrinsics
            f.write(
                f"{e.image_path} {float(e.timestamp)!r} "
                + " ".join(repr(float(x)) for x in (k.fx, k.fy, k.cx, k.cy))
                + f" {_pose_fields(e.pose)}\n"
            )


def read_label_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im).astype(np.int64)


def write_label_png(path, labels: np.ndarray):
    from PIL import Image

    dtype = np.uint8 if labels.max(initial=0) < 256 else np.uint16
    Image.fromarray(labels.astype(dtype)).save(path)


def _conf_path(image_path: Path) -> Path:
    return image_path.with_name(image_path.stem + "_conf.png")


def _probs_path(image_path: Path) -> Path:
    return image_path.with_name(image_path.stem + "_probs.npy")


def read_lidar_cfg(path) -> ProjectionModel:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise DatasetError(f"cannot read {path}")
    return _lidar_from_section(cp["lidar"])


def write_lidar_cfg(path, model: ProjectionModel):
    cp = configparser.ConfigParser()
    cp["lidar"] = _lidar_to_section(model)
    with open(path, "w") as f:
        cp.write(f)


def _lidar_from_section(s) -> ProjectionModel:
    return ProjectionModel(
        width=s.getint("width"),
        height_px=s.getint("height"),
        theta0=math.radians(s.getfloat("theta0_deg")),
        delta_theta=math.radians(s.getfloat("delta_theta_deg")),
        scale=s.getfloat("scale", 256.0),
        offset=s.getfloat("offset", 0.0),
        min_range=s.getfloat("min_range", 0.3),
    )


def _lidar_to_section(m: ProjectionModel) -> dict:
    return {
        "width": str(m.width),
        "height": str(m.height_px),
        "theta0_deg": _fmt(math.degrees(m.theta0)),
        "delta_theta_deg": _fmt(math.degrees(m.delta_theta)),
        "scale": _fmt(m.scale),
        "offset": _fmt(m.offset),
        "min_range": _fmt(m.min_range),
    }


# -- dataset ----------------------------------------------------------------------------


@dataclass
class Frame:
    index: int
    cloud: PosedCloud
    labels: LabelImage | None


class Dataset:
    """Lazily loaded frames of a dataset directory, in timestamp order."""

    def __init__(self, root, max_depth: float = 30.0):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(f"dataset root {self.root} does not exist")
        pose_file = self.root / "poses.txt"
        if not pose_file.exists():
            raise DatasetError(f"{pose_file} is missing")
        scans = sorted((self.root / "scans").glob("*.bin")) if (self.root / "scans").is_dir() else []
        stamps, poses = read_poses(pose_file)
        if len(scans) != len(poses):
            raise DatasetError(f"{len(scans)} scans, {len(poses)} poses")
        order = np.argsort(stamps, kind="stable")
        self.scans = [scans[i] for i in order]
        self.stamps = stamps[order]
        self.poses = [poses[i] for i in order]
        self.max_depth = max_depth

        lidar = self.root / "lidar.cfg"
        self.lidar = read_lidar_cfg(lidar) if lidar.exists() else ProjectionModel()
        ls = self.root / "labelset.cfg"
        self.labelset = LabelSet.load(ls) if ls.exists() else LabelSet.default()

        self.label_entries: list[LabelEntry | None] = [None] * len(self.scans)
        index = self.root / "labels_index.txt"
        if index.exists() and (self.root / "labels").is_dir():
            entries = read_label_index(index)
            if entries:
                ts = np.array([e.timestamp for e in entries])
                for i, t in enumerate(self.stamps):
                    j = int(np.argmin(np.abs(ts - t)))
                    if abs(ts[j] - t) <= LABEL_MATCH_TOLERANCE:
                        self.label_entries[i] = entries[j]
        else:
            log.info("no label images in %s: geometry-only run", self.root)

    def __len__(self):
        return len(self.scans)

    def frame(self, i: int) -> Frame:
        cloud = PosedCloud(read_kitti_scan(self.scans[i]), self.poses[i], float(self.stamps[i]))
        entry = self.label_entries[i]
        img = None
        if entry is not None:
            path = self.root / entry.image_path
            labels = read_label_png(path)
            if labels.max(initial=0) >= len(self.labelset):
                raise DatasetError(f"{path}: label id out of range for {len(self.labelset)} classes")
            conf = None
            cpath = _conf_path(path)
            if cpath.exists():
                conf = read_label_png(cpath).astype(np.float64) / 255.0
            probs = None
            ppath = _probs_path(path)
            if ppath.exists():
                probs = np.load(ppath)
                if probs.shape != labels.shape + (len(self.labelset),):
                    raise DatasetError(f"{ppath}: expected shape {labels.shape + (len(self.labelset),)}")
            img = LabelImage(labels, entry.intrinsics, entry.pose, conf, probs, self.max_depth, entry.timestamp)
        return Frame(i, cloud, img)

    def __iter__(self):
        return (self.frame(i) for i in range(len(self)))


def load_dataset(root, frames: tuple[int, int] | None = None, prefetch: bool = True, max_depth: float = 30.0):
    """Yield (PosedCloud, LabelImage or None) in timestamp order.

    With ``prefetch`` a reader thread keeps up to two decoded frames ready.
    """
    ds = Dataset(root, max_depth)
    lo, hi = frames if frames is not None else (0, len(ds))
    hi = min(hi, len(ds))
    indices = range(lo, hi)
    if not prefetch:
        for i in indices:
            f = ds.frame(i)
            yield f.cloud, f.labels
        return

    q: queue.Queue = queue.Queue(maxsize=2)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for i in indices:
                if stop.is_set():
                    return
                q.put(ds.frame(i))
            q.put(done)
        except BaseException as e:  # forwarded to the consumer
            q.put(e)

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item.cloud, item.labels
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(0.01)


# -- run configuration ------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _parse_value(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


@dataclass
class RunConfig:
    """Everything one pipeline run needs, read from a key = value file."""

    dataset: Path | None = None
    output: Path = Path("out")
    labelset: Path | None = None
    frames: tuple[int, int] | None = None
    map: MapConfig = field(default_factory=MapConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    semantics: SemanticConfig = field(default_factory=SemanticConfig)
    max_depth: float = 30.0
    traversability: TraversabilityConfig = field(default_factory=TraversabilityConfig)
    lidar: ProjectionModel | None = None  # None: take the dataset's lidar.cfg

    def validate(self):
        if self.dataset is not None and not Path(self.dataset).is_dir():
            raise DatasetError(f"dataset {self.dataset} does not exist")
        if self.labelset is not None and not Path(self.labelset).exists():
            raise DatasetError(f"label set {self.labelset} does not exist")
        if self.frames is not None and not 0 <= self.frames[0] <= self.frames[1]:
            raise ValueError("frame range must satisfy 0 <= start <= end")
        return self

    # text form

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        run = {"output": str(self.output)}
        if self.dataset is not None:
            run["dataset"] = str(self.dataset)
        if self.labelset is not None:
            run["labelset"] = str(self.labelset)
        if self.frames is not None:
            run["frames"] = f"{self.frames[0]}:{self.frames[1]}"
        cp["run"] = run
        m = self.map
        cp["map"] = {
            "voxel_size": _fmt(m.voxel_size),
            "truncation": _fmt(m.truncation),
            "num_labels": _fmt(m.num_labels),
            "max_blocks": _fmt(m.max_blocks),
        }
        cp["integrator"] = {
            f.name: _fmt(getattr(self.integrator, f.name))
            for f in fields(IntegratorConfig)
            if getattr(self.integrator, f.name) is not None
        }
        s = self.semantics
        sem = {
            "bayes": _fmt(s.bayes),
            "occlusion": s.occlusion,
            "max_depth": _fmt(self.max_depth),
            "default_confidence": _fmt(s.default_confidence),
            "keep_unresolved": _fmt(s.keep_unresolved),
            "max_grazing_factor": _fmt(s.max_grazing_factor),
        }
        if s.occlusion_margin is not None:
            sem["occlusion_margin"] = _fmt(s.occlusion_margin)
        if s.edge_ratio is not None:
            sem["edge_ratio"] = _fmt(s.edge_ratio)
        if s.unlabeled_id is not None:
            sem["unlabeled_id"] = _fmt(s.unlabeled_id)
        cp["semantics"] = sem
        t = self.traversability
        trav = {
            "radius": _fmt(t.radius),
            "max_height_diff": _fmt(t.max_height_diff),
            "max_steepness": _fmt(t.max_steepness),
            "max_roughness": _fmt(t.max_roughness),
            "grid_resolution": _fmt(t.grid_resolution),
            "inflation_radius": _fmt(t.inflation_radius),
        }
        if t.traversable_labels is not None:
            trav["traversable_labels"] = ",".join(str(x) for x in sorted(t.traversable_labels))
        cp["traversability"] = trav
        if self.lidar is not None:
            cp["lidar"] = _lidar_to_section(self.lidar)
        from io import StringIO

        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, base: Path | None = None) -> RunConfig:
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        cp.read_string(text)
        known = {"run", "map", "integrator", "semantics", "traversability", "lidar"}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ValueError(f"unknown config section(s): {', '.join(sorted(unknown))}")

        def path(v):
            p = Path(v)
            return p if p.is_absolute() or base is None else base / p

        cfg = cls()
        if cp.has_section("run"):
            r = cp["run"]
            if "dataset" in r:
                cfg.dataset = path(r["dataset"])
            if "output" in r:
                cfg.output = path(r["output"])
            if "labelset" in r:
                cfg.labelset = path(r["labelset"])
            if "frames" in r:
                a, b = r["frames"].split(":")
                cfg.frames = (int(a), int(b))
        if cp.has_section("map"):
            m = cp["map"]
            cfg.map = MapConfig(
                voxel_size=m.getfloat("voxel_size", cfg.map.voxel_size),
                truncation=_optional_float(m.get("truncation", "none")),
                num_labels=m.getint("num_labels", cfg.map.num_labels),
                max_blocks=m.getint("max_blocks", cfg.map.max_blocks),
            )
        if cp.has_section("integrator"):
            cfg.integrator = _section_to(IntegratorConfig, cp["integrator"], {"truncation": _optional_float})
        if cp.has_section("semantics"):
            s = dict(cp["semantics"])
            if "max_depth" in s:
                cfg.max_depth = float(s.pop("max_depth"))
            cfg.semantics = _section_to(
                SemanticConfig, s,
                {"occlusion_margin": _optional_float, "edge_ratio": _optional_float,
                 "unlabeled_id": lambda v: None if v.lower() == "none" else int(v)},
            )
        if cp.has_section("traversability"):
            t = dict(cp["traversability"])
            labels = t.pop("traversable_labels", None)
            cfg.traversability = _section_to(TraversabilityConfig, t, {})
            if labels is not None:
                ids = frozenset(int(x) for x in labels.split(",") if x.strip())
                cfg.traversability = replace(cfg.traversability, traversable_labels=ids)
        if cp.has_section("lidar"):
            cfg.lidar = _lidar_from_section(cp["lidar"])
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        return cls.from_text(path.read_text(), base=path.parent).validate()


def _section_to(cls, section, special: dict):
    defaults = cls()
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in dict(section).items():
        if key not in names:
            raise ValueError(f"unknown key {key!r} for {cls.__name__}")
        if key in special:
            kwargs[key] = special[key](raw)
        else:
            kwargs[key] = _parse_value(raw, getattr(defaults, key))
    return cls(**kwargs)


# -- synthetic dataset writer -----------------------------------------------------------


def write_dataset(scene, out, gt_density: float = 400.0, voxel_size: float = 0.1) -> RunConfig:
    """Render every pose of a synthetic scene into the dataset layout.

    Also writes ``scene.txt`` (with the seed), the ground-truth cloud as
    ``gt.ply`` and a matching ``run.cfg``. Synthetic worlds are a few tens of
    meters across, so the written config uses a finer voxel than the library default.
    """
    from .mesh import LabeledMesh, write_ply
    from .synthetic import format_scene, ground_truth_cloud, render_labels, render_scan

    out = Path(out)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    stamps, entries = [], []
    for i in range(len(scene.trajectory)):
        cloud = render_scan(scene, i)
        write_kitti_scan(out / "scans" / f"{i:06d}.bin", cloud.points)
        stamps.append(cloud.timestamp)
        img = render_labels(scene, i)
        name = f"labels/{i:06d}.png"
        write_label_png(out / name, img.labels)
        entries.append(LabelEntry(name, img.timestamp, img.intrinsics, img.pose))
    write_poses(out / "poses.txt", stamps, scene.trajectory)
    write_label_index(out / "labels_index.txt", entries)
    write_lidar_cfg(out / "lidar.cfg", scene.lidar)
    scene.labels.save(out / "labelset.cfg")
    (out / "scene.txt").write_text(format_scene(scene))

    gt = ground_truth_cloud(scene, gt_density)
    write_ply(out / "gt.ply", LabeledMesh(gt.points, np.zeros((0, 3), np.int64), gt.labels), scene.labels)

    cfg = RunConfig(
        dataset=Path("."),
        output=Path("out"),
        labelset=Path("labelset.cfg"),
        map=MapConfig(voxel_size=voxel_size, num_labels=len(scene.labels)),
        semantics=SemanticConfig(unlabeled_id=scene.labels.unlabeled_id),
        max_depth=scene.camera.max_depth,
    )
    cfg.save(out / "run.cfg")
    return cfg

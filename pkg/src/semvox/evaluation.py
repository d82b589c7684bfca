"""Reconstruction and semantic scores of a vertex cloud against ground truth."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


class EmptyCloudError(ValueError):
    pass


@dataclass
class EvalCloud:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ValueError("one label per point required")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("cloud coordinates must be finite")

    def __len__(self):
        return len(self.points)


@dataclass
class EvalReport:
    RE: float  # cm
    CD: float  # cm
    RC: float  # percent
    mIoU: float | None = None
    Acc: float | None = None
    per_class_iou: dict[int, float] = field(default_factory=dict)
    matched: int = 0
    unlabeled: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def per_class_csv(self, names=None) -> str:
        lines = ["class,name,iou"]
        for c, v in sorted(self.per_class_iou.items()):
            name = names[c] if names is not None and 0 <= c < len(names) else ""
            lines.append(f"{c},{name},{v!r}")
        return "\n".join(lines) + "\n"


def _points(c) -> np.ndarray:
    pts = c.points if isinstance(c, EvalCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        raise EmptyCloudError("evaluation needs nonempty clouds")
    return pts


def nearest(query: np.ndarray, ref: np.ndarray, workers: int = 1):
    """Exact nearest neighbour of each query point: (distance, index)."""
    _, idx = cKDTree(ref).query(query, k=1, workers=workers)
    d = np.sqrt(np.sum((query - ref[idx]) ** 2, axis=1))
    return d, idx


def clamped_distances(M, G, voxel_size: float, workers: int = 1) -> np.ndarray:
    """min(2*voxel_size, distance to nearest G point) for every M point (meters)."""
    d, _ = nearest(_points(M), _points(G), workers)
    return np.minimum(2.0 * voxel_size, d)


def reconstruction_error(M, G, voxel_size: float, workers: int = 1) -> float:
    d = clamped_distances(M, G, voxel_size, workers)
    return float(np.sqrt(np.mean(d * d)))


def chamfer_distance(M, G, voxel_size: float, workers: int = 1) -> float:
    a = clamped_distances(M, G, voxel_size, workers)
    b = clamped_distances(G, M, voxel_size, workers)
    return float(0.5 * np.mean(a) + 0.5 * np.mean(b))


def reconstruction_coverage(M, G, voxel_size: float, workers: int = 1) -> float:
    d, _ = nearest(_points(G), _points(M), workers)
    return float(100.0 * np.count_nonzero(d <= 2.0 * voxel_size) / len(d))


def semantic_scores(M: EvalCloud, G: EvalCloud, voxel_size: float, workers: int = 1):
    """(mIoU, Acc, per-class IoU, matched count, unlabeled count), percentages.

    Each labeled M point is paired with its nearest G point when that lies
    within 2*voxel_size. Returns None for the scores when nothing matches.
    """
    if M.labels is None or G.labels is None:
        return None, None, {}, 0, 0
    d, idx = nearest(_points(M), _points(G), workers)
    matched = d <= 2.0 * voxel_size
    unlabeled = int(np.count_nonzero(matched & (M.labels < 0)))
    matched &= M.labels >= 0
    if not matched.any():
        log.warning("no reconstructed point within 2*voxel_size of a labeled ground-truth point")
        return None, None, {}, 0, unlabeled
    pred = M.labels[matched]
    truth = G.labels[idx[matched]]
    acc = 100.0 * np.count_nonzero(pred == truth) / len(pred)
    per_class = {}
    for c in np.union1d(truth, pred):
        tp = np.count_nonzero((pred == c) & (truth == c))
        fp = np.count_nonzero((pred == c) & (truth != c))
        fn = np.count_nonzero((pred != c) & (truth == c))
        per_class[int(c)] = 100.0 * tp / (tp + fp + fn)
    miou = float(np.mean(list(per_class.values())))
    return miou, float(acc), per_class, int(np.count_nonzero(matched)), unlabeled


def evaluate(M: EvalCloud, G: EvalCloud, voxel_size: float, workers: int = 1) -> EvalReport:
    re = reconstruction_error(M, G, voxel_size, workers)
    cd = chamfer_distance(M, G, voxel_size, workers)
    rc = reconstruction_coverage(M, G, voxel_size, workers)
    miou, acc, per_class, matched, unlabeled = semantic_scores(M, G, voxel_size, workers)
    return EvalReport(100.0 * re, 100.0 * cd, rc, miou, acc, per_class, matched, unlabeled)

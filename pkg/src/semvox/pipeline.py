"""Frame-by-frame mapping: scan projection, TSDF fusion and label fusion."""

from __future__ import annotations

import time

from .projection import PosedCloud, ProjectionModel, compute_normal_image, project_cloud
from .semantics import LabelImage, SemanticConfig, integrate_labels
from .tsdf import FrameReport, IntegratorConfig, integrate_frame
from .voxel_store import MapConfig, VoxelStore


class Mapper:
    """Owns a voxel store and fuses posed scans (and label images) into it."""

    def __init__(
        self,
        map_cfg: MapConfig | None = None,
        integrator: IntegratorConfig | None = None,
        semantics: SemanticConfig | None = None,
        lidar: ProjectionModel | None = None,
        store: VoxelStore | None = None,
    ):
        self.store = store if store is not None else VoxelStore(map_cfg or MapConfig())
        self.integrator = integrator or IntegratorConfig()
        self.semantics = semantics or SemanticConfig()
        self.lidar = lidar or ProjectionModel()
        self.frames = 0

    def integrate(self, cloud: PosedCloud, labels: LabelImage | None = None) -> FrameReport:
        t0 = time.perf_counter()
        frame = self.frames
        images = compute_normal_image(project_cloud(cloud, self.lidar), self.lidar)
        rep = integrate_frame(images, self.store, self.integrator, frame=frame)
        if labels is not None:
            rep.labeled_voxels = integrate_labels(labels, self.store, self.semantics, frame).updated_voxels
        rep.elapsed = time.perf_counter() - t0
        self.frames += 1
        return rep

    def integrate_geometry(self, cloud: PosedCloud) -> FrameReport:
        images = compute_normal_image(project_cloud(cloud, self.lidar), self.lidar)
        rep = integrate_frame(images, self.store, self.integrator, frame=self.frames)
        self.frames += 1
        return rep

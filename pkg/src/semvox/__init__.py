"""Semantic TSDF mapping with non-projective distances, traversability and planning."""

from .evaluation import EvalCloud, EvalReport, evaluate
from .mesh import LabeledMesh, MeshCache, extract_mesh, read_ply, write_ply
from .pipeline import Mapper
from .projection import PosedCloud, Pose, ProjectionModel, ScanImages, compute_normal_image, project_cloud
from .semantics import LabelImage, LabelSet, SemanticConfig, integrate_labels
from .traversability import OccupancyGrid, TraversabilityConfig, plan_path, project_occupancy, score_vertices
from .tsdf import IntegratorConfig, integrate_frame
from .voxel_store import MapConfig, VoxelStore

__version__ = "0.1.0"

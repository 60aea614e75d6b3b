"""Global structure-from-motion back-end.

Turns per-image keypoints, matches, descriptors, and intrinsics into
globally consistent camera poses and a sparse point cloud: view-graph cycle
filtering, certifiable rotation averaging, direction-based translation
averaging, track triangulation, and staged bundle adjustment, plus a
synthetic orbit-scene oracle and evaluation metrics.
"""

__version__ = "0.1.0"

from .config import PipelineConfig, load_config
from .errors import GlobalSfmError
from .metrics import MetricsReport, compute_metrics, pose_auc
from .pipeline import (SfmResult, dump_view_graph, evaluate_pose_files,
                       run_pipeline)
from .synthetic import generate_orbit_scene, inject_outlier_edges

__all__ = [
    "GlobalSfmError",
    "MetricsReport",
    "PipelineConfig",
    "SfmResult",
    "__version__",
    "compute_metrics",
    "dump_view_graph",
    "evaluate_pose_files",
    "generate_orbit_scene",
    "inject_outlier_edges",
    "load_config",
    "pose_auc",
    "run_pipeline",
]

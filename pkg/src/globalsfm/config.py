"""Pipeline configuration: defaults, JSON loading, strict validation.

A configuration can come from three layers, later layers winning:
built-in defaults, a JSON config file (a flat object whose keys are the
field names below), and explicit overrides (e.g. command-line flags).
Unknown keys are rejected rather than ignored so typos cannot silently
disable a setting.
"""

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .bundle_adjustment import BaConfig
from .errors import ConfigError
from .rotation_averaging import RotationConfig
from .tracks import TriangulationConfig
from .translation_averaging import TranslationConfig
from .two_view import VerificationConfig

ENV_WORKERS = "GLOBALSFM_WORKERS"


def default_workers() -> int:
    """Worker count from the environment, defaulting to 1."""
    raw = os.environ.get(ENV_WORKERS)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{ENV_WORKERS} must be an integer, got {raw!r}") \
            from exc
    if value < 1:
        raise ConfigError(f"{ENV_WORKERS} must be >= 1, got {value}")
    return value


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the reconstruction pipeline in one flat record.

    Ablation switches: ``enable_two_view_ba`` controls the pairwise bundle
    refinement inside verification; ``enable_landmark_directions`` controls
    whether camera-to-landmark directions join the position solve;
    ``translation_huber_delta`` / ``ba_huber_px`` of ``None`` fall back to
    plain least squares.
    """

    # paths
    input_dir: str = "."
    output_dir: str = "out"
    gt_poses_file: str | None = None
    # execution
    n_workers: int = 0  # 0 = resolve from the environment at run time
    seed: int = 0
    # retrieval
    retrieval_lookahead: int = 10
    retrieval_k_small: int = 5
    retrieval_k_large: int = 15
    retrieval_k_switch: int = 500
    retrieval_min_score: float = 0.1
    # two-view verification
    ransac_threshold_px: float = 4.0
    ransac_confidence: float = 0.9999
    max_ransac_iters: int = 10000
    min_inlier_ratio: float = 0.10
    min_inliers: int = 15
    enable_two_view_ba: bool = True
    # Keypoint duplicate-merging is for front-ends that emit per-pair
    # detections of the same feature; canonical keypoint files (one entry
    # per feature) must keep it off or distinct close points collapse.
    enable_nms_merge: bool = False
    two_view_ba_reproj_prune_px: float = 0.5
    nms_radius_px: float = 3.0
    # view-graph cycle filter
    cycle_epsilon_deg: float = 7.0
    # rotation averaging
    rotation_sigma: float = 1.0
    max_staircase_level: int = 30
    # translation averaging
    mfas_projections: int = 48
    mfas_rejection_ratio: float = 0.1
    translation_huber_delta: float | None = 0.1
    translation_init_trials: int = 50
    enable_landmark_directions: bool = True
    landmark_tracks_per_camera: int = 3
    # triangulation
    min_track_length: int = 3
    max_triangulation_hypotheses: int = 100
    triangulation_threshold_px: float = 10.0
    # bundle adjustment
    ba_huber_px: float | None = 1.345
    ba_max_iterations: int = 100
    ba_filter_thresholds_px: tuple = (10.0, 5.0, 3.0)
    optimize_intrinsics: bool = False

    def __post_init__(self):
        positive_ints = (
            "retrieval_lookahead", "retrieval_k_small", "retrieval_k_large",
            "retrieval_k_switch", "max_ransac_iters", "min_inliers",
            "max_staircase_level", "mfas_projections",
            "translation_init_trials", "landmark_tracks_per_camera",
            "max_triangulation_hypotheses", "ba_max_iterations")
        for name in positive_ints:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        positive_floats = (
            "ransac_threshold_px", "two_view_ba_reproj_prune_px",
            "nms_radius_px", "cycle_epsilon_deg", "rotation_sigma",
            "triangulation_threshold_px")
        for name in positive_floats:
            if float(getattr(self, name)) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if self.n_workers < 0:
            raise ConfigError("n_workers must be >= 1 (or 0 for automatic)")
        if int(self.seed) < 0:
            raise ConfigError("seed must be >= 0")
        if not 0.0 < self.ransac_confidence < 1.0:
            raise ConfigError("ransac_confidence must be in (0, 1)")
        if not 0.0 <= self.min_inlier_ratio <= 1.0:
            raise ConfigError("min_inlier_ratio must be in [0, 1]")
        if not 0.0 < self.mfas_rejection_ratio < 1.0:
            raise ConfigError("mfas_rejection_ratio must be in (0, 1)")
        if self.min_track_length < 2:
            raise ConfigError("min_track_length must be >= 2")
        for name in ("translation_huber_delta", "ba_huber_px"):
            value = getattr(self, name)
            if value is not None and float(value) <= 0.0:
                raise ConfigError(f"{name} must be positive or null")
        if (not self.ba_filter_thresholds_px
                or any(t <= 0 for t in self.ba_filter_thresholds_px)):
            raise ConfigError("ba_filter_thresholds_px must be positive")

    def resolved_workers(self) -> int:
        return self.n_workers if self.n_workers >= 1 else default_workers()

    def verification_config(self) -> VerificationConfig:
        return VerificationConfig(
            ransac_threshold_px=self.ransac_threshold_px,
            ransac_confidence=self.ransac_confidence,
            max_ransac_iters=self.max_ransac_iters,
            min_inlier_ratio=self.min_inlier_ratio,
            min_inliers=self.min_inliers,
            two_view_ba_reproj_prune_px=self.two_view_ba_reproj_prune_px,
            nms_radius_px=self.nms_radius_px,
            enable_two_view_ba=self.enable_two_view_ba)

    def rotation_config(self) -> RotationConfig:
        return RotationConfig(max_staircase_level=self.max_staircase_level)

    def translation_config(self) -> TranslationConfig:
        return TranslationConfig(
            n_projections=self.mfas_projections,
            mfas_rejection_ratio=self.mfas_rejection_ratio,
            huber_delta=self.translation_huber_delta,
            init_trials=self.translation_init_trials,
            landmark_tracks_per_camera=self.landmark_tracks_per_camera)

    def triangulation_config(self) -> TriangulationConfig:
        return TriangulationConfig(
            min_track_length=self.min_track_length,
            max_hypotheses=self.max_triangulation_hypotheses,
            inlier_threshold_px=self.triangulation_threshold_px)

    def ba_config(self) -> BaConfig:
        return BaConfig(
            huber_px=self.ba_huber_px,
            max_iterations=self.ba_max_iterations,
            optimize_intrinsics=self.optimize_intrinsics,
            min_track_length=self.min_track_length,
            filter_thresholds_px=tuple(self.ba_filter_thresholds_px))


_TUPLE_FIELDS = {"ba_filter_thresholds_px"}


def load_config(path=None, overrides: dict = None) -> PipelineConfig:
    """Build a validated PipelineConfig from a JSON file plus overrides.

    Args:
        path: optional JSON config file (a flat object of field values).
        overrides: optional dict applied on top of the file.  Every entry is
            applied verbatim, including ``None`` (meaningful for the nullable
            Huber parameters); leave a key out to keep the file value.

    Raises:
        ConfigError: unreadable file, unknown keys, or invalid values.
    """
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        data.update(loaded)
    if overrides:
        data.update(overrides)

    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for name in _TUPLE_FIELDS & set(data):
        try:
            data[name] = tuple(float(v) for v in data[name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name} must be a list of numbers") from exc
    try:
        return PipelineConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

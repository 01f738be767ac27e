from typing import Dict, Optional
from enum import Enum
import math
import logging

from pydantic import BaseModel, Field, validator, root_validator

logger = logging.getLogger("segmatch.schemas")


# --- Enumerations ---

class GroundRemoval(str, Enum):
    """Ground removal strategies."""
    MIN_HEIGHT = "min-height"
    VOXEL_STATISTICS = "voxel-statistics"


class SegmenterKind(str, Enum):
    """Segmentation strategies.

    - euclidean: connected components under a distance threshold
    - region-growing: smoothness-constrained growth from low-curvature seeds
    """
    EUCLIDEAN = "euclidean"
    REGION_GROWING = "region-growing"


class ClassifierKind(str, Enum):
    L2 = "l2"
    FOREST = "forest"


class FeatureSet(str, Enum):
    """Pair-feature layouts a forest can be trained on.

    - eigen: |f_i - f_j|, f_i, f_j over the eigenvalue block (21 columns)
    - eigen+shapes: the above plus 10 histogram intersections (31 columns)
    """
    EIGEN = "eigen"
    EIGEN_SHAPES = "eigen+shapes"

    @property
    def column_count(self) -> int:
        return 21 if self is FeatureSet.EIGEN else 31

    @property
    def default_threshold(self) -> float:
        # Operating points at FPR 0.2 reported for the two forest variants
        return 0.81 if self is FeatureSet.EIGEN else 0.72


class PipelineMode(str, Enum):
    """Where the target map comes from.

    - localization: map loaded from disk and never modified
    - loop-closure: map built online from the scans themselves
    """
    LOCALIZATION = "localization"
    LOOP_CLOSURE = "loop-closure"


class DetectionOutcome(str, Enum):
    NONE = "none"
    TRUE_POSITIVE = "true_positive"
    FALSE_POSITIVE = "false_positive"


class PipelineStage(str, Enum):
    SEGMENTATION = "segmentation"
    DESCRIPTION = "description"
    MATCHING = "matching"
    VERIFICATION = "verification"


TIMED_STAGES = (
    PipelineStage.SEGMENTATION,
    PipelineStage.DESCRIPTION,
    PipelineStage.MATCHING,
    PipelineStage.VERIFICATION,
)


# --- Stage parameters ---

class SegmentationParams(BaseModel):
    cluster_distance: float = Field(0.2, gt=0)
    min_segment_points: int = Field(100, gt=0)
    max_segment_points: int = Field(15000, gt=0)
    ground_removal: GroundRemoval = GroundRemoval.MIN_HEIGHT
    ground_height: float = 0.0
    # voxel-statistics ground removal
    ground_cell_size: float = Field(0.5, gt=0)
    ground_max_variance: float = Field(0.002, gt=0)
    ground_height_band: float = Field(0.3, gt=0)
    ground_min_cells: int = Field(4, ge=1)

    @root_validator(skip_on_failure=True)
    def check_size_bounds(cls, values):
        if values["min_segment_points"] > values["max_segment_points"]:
            raise ValueError(
                f"min_segment_points ({values['min_segment_points']}) exceeds "
                f"max_segment_points ({values['max_segment_points']})"
            )
        return values


class RegionGrowingParams(BaseModel):
    normal_radius: float = Field(0.3, gt=0)
    smoothness_threshold: float = Field(0.1, gt=0, description="radians")
    curvature_threshold: float = Field(0.05, gt=0)


class DescriptorParams(BaseModel):
    sample_count: int = Field(20000, ge=1)
    line_samples: int = Field(32, ge=3)
    rng_seed: int = 0
    with_shapes: bool = True
    workers: int = Field(1, ge=1)


class ForestParams(BaseModel):
    n_trees: int = Field(25, ge=1)
    max_depth: int = Field(20, ge=0)
    min_leaf: int = Field(5, ge=1)
    seed: int = 0
    feature_set: FeatureSet = FeatureSet.EIGEN_SHAPES
    workers: int = Field(1, ge=1)


class VerifyParams(BaseModel):
    resolution: float = Field(0.4, gt=0)
    min_cluster_size: int = Field(4, ge=3)
    max_iterations: int = Field(400, ge=1)
    confidence: float = Field(0.999, gt=0, lt=1)
    seed: int = 0


class TargetMapParams(BaseModel):
    duplicate_distance: float = Field(1.0, gt=0)
    boundary_thickness: float = Field(3.0, gt=0)


# --- Run configuration ---

class PipelineConfig(BaseModel):
    """Flat run configuration; one field per key of the config file.

    Defaults follow the published parameter table where a value is given.
    boundary_thickness, duplicate_distance, exclusion_window,
    correspondence_gate and the closure gates are tuned, not published.
    """
    mode: PipelineMode = PipelineMode.LOOP_CLOSURE

    # ingestion
    keep_ratio: float = Field(0.5, gt=0, le=1)
    scan_spacing: float = Field(1.0, ge=0)
    sensor_height: float = 1.73
    scans_in_sensor_frame: bool = True
    accumulate_scans: bool = True

    # local cloud
    cylinder_radius: float = Field(60.0, gt=0)
    boundary_thickness: float = Field(3.0, gt=0)
    voxel_leaf: float = Field(0.1, gt=0)
    min_points_per_voxel: int = Field(2, ge=1)

    # segmentation
    segmenter: SegmenterKind = SegmenterKind.EUCLIDEAN
    cluster_distance: float = Field(0.2, gt=0)
    min_segment_points: int = Field(100, gt=0)
    max_segment_points: int = Field(15000, gt=0)
    ground_removal: GroundRemoval = GroundRemoval.MIN_HEIGHT
    ground_height: float = 0.0
    ground_cell_size: float = Field(0.5, gt=0)
    ground_max_variance: float = Field(0.002, gt=0)
    ground_height_band: float = Field(0.3, gt=0)
    ground_min_cells: int = Field(4, ge=1)
    normal_radius: float = Field(0.3, gt=0)
    smoothness_threshold: float = Field(0.1, gt=0)
    curvature_threshold: float = Field(0.05, gt=0)

    # description
    esf_sample_count: int = Field(20000, ge=1)
    esf_line_samples: int = Field(32, ge=3)
    descriptor_seed: int = 0
    description_workers: int = Field(1, ge=1)

    # matching
    knn: int = Field(200, ge=1)
    classifier: ClassifierKind = ClassifierKind.FOREST
    l2_threshold: float = Field(0.0024, gt=0)
    forest_feature_set: FeatureSet = FeatureSet.EIGEN_SHAPES
    forest_threshold: Optional[float] = Field(None, ge=0, le=1)
    n_trees: int = Field(25, ge=1)
    max_depth: int = Field(20, ge=0)
    min_leaf: int = Field(5, ge=1)
    forest_seed: int = 0
    training_workers: int = Field(1, ge=1)

    # geometric verification
    ransac_resolution: float = Field(0.4, gt=0)
    min_cluster_size: int = Field(4, ge=3)
    ransac_max_iterations: int = Field(400, ge=1)
    ransac_confidence: float = Field(0.999, gt=0, lt=1)
    ransac_seed: int = 0

    # target map
    duplicate_distance: float = Field(1.0, gt=0)
    exclusion_window: float = Field(50.0, ge=0)

    # training pairs
    correspondence_gate: float = Field(1.0, gt=0)
    negative_ratio: int = Field(50, ge=1)
    training_seed: int = 0

    # evaluation
    closure_translation_gate: float = Field(2.0, gt=0)
    closure_rotation_gate_deg: float = Field(5.0, gt=0)

    class Config:
        extra = "forbid"
        validate_assignment = True

    @root_validator(skip_on_failure=True)
    def check_consistency(cls, values):
        if values["boundary_thickness"] >= values["cylinder_radius"]:
            raise ValueError(
                f"boundary_thickness ({values['boundary_thickness']}) must be smaller "
                f"than cylinder_radius ({values['cylinder_radius']})"
            )
        if values["min_segment_points"] > values["max_segment_points"]:
            raise ValueError("min_segment_points exceeds max_segment_points")
        return values

    # --- derived parameter objects ---

    @property
    def inner_radius(self) -> float:
        return self.cylinder_radius - self.boundary_thickness

    @property
    def uses_shapes(self) -> bool:
        return self.classifier is ClassifierKind.FOREST and self.forest_feature_set is FeatureSet.EIGEN_SHAPES

    @property
    def effective_forest_threshold(self) -> float:
        if self.forest_threshold is not None:
            return self.forest_threshold
        return self.forest_feature_set.default_threshold

    def segmentation_params(self) -> SegmentationParams:
        return SegmentationParams(
            cluster_distance=self.cluster_distance,
            min_segment_points=self.min_segment_points,
            max_segment_points=self.max_segment_points,
            ground_removal=self.ground_removal,
            ground_height=self.ground_height,
            ground_cell_size=self.ground_cell_size,
            ground_max_variance=self.ground_max_variance,
            ground_height_band=self.ground_height_band,
            ground_min_cells=self.ground_min_cells,
        )

    def region_growing_params(self) -> RegionGrowingParams:
        return RegionGrowingParams(
            normal_radius=self.normal_radius,
            smoothness_threshold=self.smoothness_threshold,
            curvature_threshold=self.curvature_threshold,
        )

    def descriptor_params(self, with_shapes: Optional[bool] = None) -> DescriptorParams:
        return DescriptorParams(
            sample_count=self.esf_sample_count,
            line_samples=self.esf_line_samples,
            rng_seed=self.descriptor_seed,
            with_shapes=self.uses_shapes if with_shapes is None else with_shapes,
            workers=self.description_workers,
        )

    def forest_params(self) -> ForestParams:
        return ForestParams(
            n_trees=self.n_trees,
            max_depth=self.max_depth,
            min_leaf=self.min_leaf,
            seed=self.forest_seed,
            feature_set=self.forest_feature_set,
            workers=self.training_workers,
        )

    def verify_params(self) -> VerifyParams:
        return VerifyParams(
            resolution=self.ransac_resolution,
            min_cluster_size=self.min_cluster_size,
            max_iterations=self.ransac_max_iterations,
            confidence=self.ransac_confidence,
            seed=self.ransac_seed,
        )

    def target_map_params(self) -> TargetMapParams:
        return TargetMapParams(
            duplicate_distance=self.duplicate_distance,
            boundary_thickness=self.boundary_thickness,
        )


# --- Evaluation records ---

class EvalRecord(BaseModel):
    """Per-scan evaluation row."""
    scan_index: int
    travelled: float = Field(0.0, ge=0, description="meters since the previous admitted scan")
    distance_since_detection: float = Field(0.0, ge=0)
    outcome: DetectionOutcome = DetectionOutcome.NONE
    consensus_size: int = Field(0, ge=0)
    source_segments: int = Field(0, ge=0)
    target_segments: int = Field(0, ge=0)
    candidate_matches: int = Field(0, ge=0)
    timings_ms: Dict[PipelineStage, float] = Field(default_factory=dict)

    @validator("timings_ms")
    def check_timings(cls, v):
        for stage, value in v.items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"timing for {stage} must be a non-negative finite number, got {value}")
        return v

    @property
    def detected(self) -> bool:
        return self.outcome is DetectionOutcome.TRUE_POSITIVE

    def total_ms(self) -> float:
        return sum(self.timings_ms.get(stage, 0.0) for stage in TIMED_STAGES)

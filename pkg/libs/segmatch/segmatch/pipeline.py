"""Per-scan loop: local cloud -> segments -> descriptors -> candidates -> verified closure."""
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .cloud import (
    VoxelAccumulator,
    extract_cylindrical_neighborhood,
    transform_cloud,
    uniform_downsample,
    voxel_grid_filter,
)
from .descriptors import describe_segments
from .exceptions import ModelIncompatibleError, SegMatchError, StageError, TrainingError
from .forest import ForestModel, TrainingSet
from .geomverify import ransac_verify
from .matching import (
    Classifier,
    FeatureIndexCache,
    ForestClassifier,
    L2Classifier,
    match_segments,
    pair_feature_matrix,
    retrieve_candidates,
)
from .models import LoopClosure, PointCloud, Pose, Segment, Trajectory, pose_error
from .schemas import (
    ClassifierKind,
    DetectionOutcome,
    EvalRecord,
    FeatureSet,
    PipelineConfig,
    PipelineMode,
    PipelineStage,
    SegmenterKind,
)
from .segmentation import ground_mask, segment_cloud
from .targetmap import TargetMap, filter_incomplete, insert_segments, remove_duplicates, update_poses

logger = logging.getLogger("segmatch.pipeline")

# voxels farther than this multiple of R from the robot are dropped from the accumulated map
ACCUMULATOR_PRUNE_FACTOR = 1.5


@dataclass
class PipelineState:
    """Mutable per-sequence state carried between process_scan calls."""
    scans_processed: int = 0
    next_segment_id: int = 0
    travelled: float = 0.0
    distance_since_detection: float = 0.0
    last_position: Optional[np.ndarray] = None
    odometer: Dict[int, float] = field(default_factory=dict)
    accumulator: Optional[VoxelAccumulator] = None
    index_cache: FeatureIndexCache = field(default_factory=FeatureIndexCache)
    stage_runs: Dict[PipelineStage, int] = field(default_factory=lambda: {stage: 0 for stage in PipelineStage})

    def advance(self, scan_index: int, pose: Pose) -> float:
        position = np.asarray(pose.translation, dtype=np.float64)
        step = 0.0 if self.last_position is None else float(np.linalg.norm(position - self.last_position))
        self.last_position = position
        self.travelled += step
        self.distance_since_detection += step
        self.odometer[scan_index] = self.travelled
        return step

    def window_start(self, scan_index: int, exclusion_window: float) -> int:
        """Lowest scan index whose odometer lies within exclusion_window of the current travel."""
        horizon = self.travelled - exclusion_window
        inside = [index for index, odo in self.odometer.items() if odo > horizon]
        return min(inside) if inside else scan_index

    def eligible(self, segment: Segment, exclusion_window: float) -> bool:
        created = self.odometer.get(segment.creation_index)
        return created is None or created <= self.travelled - exclusion_window


@dataclass(frozen=True, eq=False)
class ScanOutcome:
    closure: Optional[LoopClosure]
    target_map: TargetMap
    record: EvalRecord
    sources: Tuple[Segment, ...] = ()
    stage_runs: Dict[PipelineStage, int] = field(default_factory=dict)

    def __iter__(self):
        return iter((self.closure, self.target_map, self.record))


@contextmanager
def _stage(stage: PipelineStage, timings: Dict[PipelineStage, float], runs: Dict[PipelineStage, int]):
    started = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage {stage.value} failed: {e}", exc_info=not isinstance(e, SegMatchError))
        raise StageError(stage.value, e) from e
    finally:
        timings[stage] = timings.get(stage, 0.0) + 1000.0 * (time.perf_counter() - started)
        runs[stage] = runs.get(stage, 0) + 1


def build_classifier(config: PipelineConfig, model: Optional[ForestModel]) -> Classifier:
    if config.classifier is ClassifierKind.L2:
        return L2Classifier(config.l2_threshold)
    if model is not None and model.feature_count != config.forest_feature_set.column_count:
        raise ModelIncompatibleError(
            f"model uses {model.feature_count} pair features but forest_feature_set="
            f"{config.forest_feature_set.value} needs {config.forest_feature_set.column_count}"
        )
    return ForestClassifier(model, config.effective_forest_threshold)


def _local_cloud(scan: PointCloud, pose: Pose, config: PipelineConfig, state: PipelineState) -> PointCloud:
    cloud = uniform_downsample(scan, config.keep_ratio)
    if config.scans_in_sensor_frame:
        cloud = PointCloud(transform_cloud(cloud, pose).points, "world")
    center = pose.translation
    if not config.accumulate_scans:
        local = extract_cylindrical_neighborhood(cloud, center, config.cylinder_radius)
        return voxel_grid_filter(local, config.voxel_leaf, config.min_points_per_voxel)
    if state.accumulator is None:
        state.accumulator = VoxelAccumulator(config.voxel_leaf, config.min_points_per_voxel, cloud.frame_id)
    state.accumulator.insert(cloud)
    state.accumulator.prune(center, ACCUMULATOR_PRUNE_FACTOR * config.cylinder_radius)
    return state.accumulator.active_cloud(center, config.cylinder_radius)


def extract_sources(
    scan: PointCloud,
    pose: Pose,
    config: PipelineConfig,
    state: PipelineState,
    scan_index: int,
    timings: Dict[PipelineStage, float],
    runs: Dict[PipelineStage, int],
    with_shapes: Optional[bool] = None,
) -> List[Segment]:
    """Segment and describe the local cloud once; the result feeds both matching and the map."""
    with _stage(PipelineStage.SEGMENTATION, timings, runs):
        local = _local_cloud(scan, pose, config, state)
        # ground heights are measured from the ground plane under the sensor
        ground_z = pose.translation[2] - config.sensor_height
        shifted = local.with_points(local.points - np.array([0.0, 0.0, ground_z])) if len(local) else local
        mask = ground_mask(shifted, config.segmentation_params())
        objects = local.with_points(local.points[~mask]) if len(local) else local
        growing = config.region_growing_params() if config.segmenter is SegmenterKind.REGION_GROWING else None
        segments = segment_cloud(
            objects,
            config.segmentation_params(),
            growing,
            id_offset=state.next_segment_id,
            creation_index=scan_index,
        )
        if segments:
            state.next_segment_id = max(s.id for s in segments) + 1
        complete = filter_incomplete(segments, pose.translation, config.cylinder_radius, config.boundary_thickness)
        tiny = [s for s in complete if len(s) < 3]
        if tiny:
            logger.warning(f"Scan {scan_index}: dropping {len(tiny)} segments with fewer than 3 points")
            complete = [s for s in complete if len(s) >= 3]

    with _stage(PipelineStage.DESCRIPTION, timings, runs):
        sources = describe_segments(complete, config.descriptor_params(with_shapes))
    logger.debug(
        f"Scan {scan_index}: {len(local)} local points, {int(np.count_nonzero(mask))} ground, "
        f"{len(segments)} segments, {len(sources)} complete"
    )
    return sources


def classify_outcome(closure: Optional[LoopClosure], expected: Pose, config: PipelineConfig) -> DetectionOutcome:
    if closure is None:
        return DetectionOutcome.NONE
    translation_error, rotation_error = pose_error(closure.transform, expected)
    if translation_error <= config.closure_translation_gate and np.degrees(rotation_error) <= config.closure_rotation_gate_deg:
        return DetectionOutcome.TRUE_POSITIVE
    return DetectionOutcome.FALSE_POSITIVE


def process_scan(
    scan: PointCloud,
    pose: Pose,
    config: PipelineConfig,
    target_map: TargetMap,
    model: Optional[ForestModel] = None,
    state: Optional[PipelineState] = None,
    scan_index: Optional[int] = None,
    expected: Optional[Pose] = None,
) -> ScanOutcome:
    """Run one scan through the full loop.

    In loop-closure mode the targets eligible for matching are snapshotted
    before this scan's segments are inserted, and exclude every segment
    created within exclusion_window meters of travel. expected is the true
    target<-source transform (identity when scans carry ground-truth poses).
    """
    state = state if state is not None else PipelineState()
    scan_index = state.scans_processed if scan_index is None else scan_index
    step = state.advance(scan_index, pose)
    state.next_segment_id = max(state.next_segment_id, target_map.next_id)
    timings: Dict[PipelineStage, float] = {}
    runs: Dict[PipelineStage, int] = {}
    classifier = build_classifier(config, model)

    sources = extract_sources(scan, pose, config, state, scan_index, timings, runs)

    with _stage(PipelineStage.MATCHING, timings, runs):
        if config.mode is PipelineMode.LOOP_CLOSURE:
            eligible = [s.id for s in target_map if state.eligible(s, config.exclusion_window)]
            target_map = insert_segments(target_map, sources, scan_index)
            target_map = remove_duplicates(target_map, state.window_start(scan_index, config.exclusion_window))
            targets = {sid: target_map.segments[sid] for sid in eligible if sid in target_map}
        else:
            targets = dict(target_map.segments)
        index = state.index_cache.get(targets)
        matches = match_segments(sources, index, config.knn, classifier) if len(index) else []

    with _stage(PipelineStage.VERIFICATION, timings, runs):
        closure = ransac_verify(matches, config.verify_params(), source_scan_index=scan_index)

    outcome = classify_outcome(closure, expected if expected is not None else Pose.identity(), config)
    if outcome is DetectionOutcome.TRUE_POSITIVE:
        state.distance_since_detection = 0.0
    if closure is not None:
        logger.info(
            f"Scan {scan_index}: closure with {closure.consensus_size} segments ({outcome.value}), "
            f"t={np.round(closure.transform.translation, 3).tolist()}"
        )

    for stage, count in runs.items():
        state.stage_runs[stage] += count
    state.scans_processed += 1
    record = EvalRecord(
        scan_index=scan_index,
        travelled=step,
        distance_since_detection=state.distance_since_detection,
        outcome=outcome,
        consensus_size=closure.consensus_size if closure else 0,
        source_segments=len(sources),
        target_segments=len(index),
        candidate_matches=len(matches),
        timings_ms=timings,
    )
    return ScanOutcome(closure, target_map, record, tuple(sources), runs)


class SegMatchPipeline:
    """Drives process_scan over a sequence, admitting scans by travelled distance."""

    def __init__(self, config: PipelineConfig, model: Optional[ForestModel] = None,
                 target_map: Optional[TargetMap] = None):
        self.config = config
        self.model = model
        self.target_map = target_map if target_map is not None else TargetMap.empty(config.target_map_params())
        self.state = PipelineState()
        self.records: List[EvalRecord] = []
        self.closures: List[LoopClosure] = []
        self._admitted_position: Optional[np.ndarray] = None
        self._poses: Dict[int, Pose] = {}
        build_classifier(config, model)
        if config.mode is PipelineMode.LOCALIZATION and not len(self.target_map):
            logger.warning("Localization mode with an empty target map: no closure can be found")

    def admit(self, pose: Pose) -> bool:
        position = np.asarray(pose.translation)
        if self._admitted_position is None:
            return True
        return float(np.linalg.norm(position - self._admitted_position)) >= self.config.scan_spacing

    def process(self, scan_index: int, scan: PointCloud, pose: Pose,
                expected: Optional[Pose] = None) -> Optional[ScanOutcome]:
        if not self.admit(pose):
            logger.debug(f"Scan {scan_index} skipped: less than {self.config.scan_spacing} m since the last scan")
            return None
        self._admitted_position = np.asarray(pose.translation)
        self._poses[scan_index] = pose
        outcome = process_scan(scan, pose, self.config, self.target_map, self.model,
                               state=self.state, scan_index=scan_index, expected=expected)
        self.target_map = outcome.target_map
        self.records.append(outcome.record)
        if outcome.closure is not None:
            self.closures.append(outcome.closure)
        return outcome

    def run(self, sequence: Iterable[Tuple[int, PointCloud, Pose]]) -> Iterator[ScanOutcome]:
        for scan_index, scan, pose in sequence:
            outcome = self.process(scan_index, scan, pose)
            if outcome is not None:
                yield outcome

    @property
    def trajectory(self) -> Trajectory:
        indices = sorted(self._poses)
        return Trajectory(tuple(indices), tuple(self._poses[i] for i in indices))

    def update_trajectory(self, new_trajectory: Trajectory) -> TargetMap:
        """Re-anchor the map on a re-estimated trajectory (e.g. after pose-graph optimization)."""
        self.target_map = update_poses(self.target_map, self.trajectory, new_trajectory)
        self._poses = {i: new_trajectory.pose_at(i) for i in self._poses}
        return self.target_map


def generate_training_pairs(sequence: Iterable[Tuple[int, PointCloud, Pose]], config: PipelineConfig) -> TrainingSet:
    """Labelled segment pairs from a sequence with ground-truth poses and at least one revisit.

    A scan whose surroundings already hold eligible map segments is a revisit:
    its segments are paired with their knn nearest eligible targets, labelled
    a match when the centroids lie within correspondence_gate. All other scans
    only grow the map. Negatives are then thinned to negative_ratio per positive.
    """
    state = PipelineState()
    target_map = TargetMap.empty(config.target_map_params())
    with_shapes = config.forest_feature_set is FeatureSet.EIGEN_SHAPES
    admitted: Optional[np.ndarray] = None
    features, labels = [], []
    revisits = 0
    for scan_index, scan, pose in sequence:
        position = np.asarray(pose.translation)
        if admitted is not None and np.linalg.norm(position - admitted) < config.scan_spacing:
            continue
        admitted = position
        state.advance(scan_index, pose)
        timings: Dict[PipelineStage, float] = {}
        sources = extract_sources(scan, pose, config, state, scan_index, timings, {}, with_shapes=with_shapes)

        eligible = target_map.snapshot(s.id for s in target_map if state.eligible(s, config.exclusion_window))
        nearby = eligible.segments_near(position, config.inner_radius) if len(eligible) else []
        if nearby and sources:
            revisits += 1
            index = state.index_cache.get(eligible.segments)
            pairs = [pair for source in sources for pair in retrieve_candidates(index, source, config.knn)]
            if pairs:
                features.append(pair_feature_matrix(pairs))
                gaps = np.array([np.linalg.norm(p.source.centroid - p.target.centroid) for p in pairs])
                labels.append(gaps <= config.correspondence_gate)
        else:
            target_map = insert_segments(target_map, sources, scan_index)
            target_map = remove_duplicates(target_map, state.window_start(scan_index, config.exclusion_window))

    if revisits == 0:
        raise TrainingError("sequence contains no revisit: no scan overlaps earlier map segments")
    training_set = TrainingSet(np.vstack(features), np.concatenate(labels)) if features else TrainingSet.from_pairs([])
    if training_set.positives == 0:
        raise TrainingError(f"{revisits} revisit scans produced no corresponding segment pairs")
    logger.info(
        f"Training pairs: {training_set.positives} positive, {training_set.negatives} negative "
        f"from {revisits} revisit scans"
    )
    return training_set.subsample_negatives(config.negative_ratio, config.training_seed)

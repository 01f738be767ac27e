import time

import numpy as np
import pytest

from conftest import synthetic_config
from segmatch.exceptions import ModelIncompatibleError, TrainingError
from segmatch.evaluation import timing_report
from segmatch.forest import PAIR_FEATURE_COUNT, TrainingSet, train, train_with_params
from segmatch.matching import ForestClassifier, L2Classifier
from segmatch.models import LoopClosure, PointCloud, Pose, Trajectory, pose_error
from segmatch.pipeline import (
    PipelineState,
    SegMatchPipeline,
    build_classifier,
    classify_outcome,
    generate_training_pairs,
    process_scan,
)
from segmatch.schemas import TIMED_STAGES, DetectionOutcome, FeatureSet, PipelineMode, PipelineStage
from segmatch.synthetic import generate_sequence, generate_world, revisit_sequence
from segmatch.targetmap import TargetMap, load_map, save_map

OFFSET = Pose.from_translation((1.0, -0.5, 0.0))


def shifted(pose: Pose, dx: float) -> Pose:
    return Pose(pose.rotation, pose.translation + np.array([dx, 0.0, 0.0]))


@pytest.fixture
def revisit(synthetic_scan):
    """Scan A, an empty scan 60 m away, then scan A again from the same pose."""
    scan, pose = synthetic_scan
    empty = PointCloud(np.empty((0, 3)), "sensor")
    return [(0, scan, pose), (1, empty, shifted(pose, 60.0)), (2, scan, pose)]


class TestPipelineState:
    def test_odometer_and_window(self):
        state = PipelineState()
        for index, x in enumerate([0.0, 10.0, 30.0, 60.0]):
            state.advance(index, Pose.from_translation((x, 0.0, 0.0)))
        assert state.travelled == 60.0
        assert state.window_start(3, 50.0) == 2
        assert state.window_start(3, 0.0) == 3

    def test_window_covers_current_scan_at_start(self):
        state = PipelineState()
        state.advance(0, Pose.identity())
        assert state.window_start(0, 50.0) == 0


class TestBuildClassifier:
    def test_l2(self):
        assert isinstance(build_classifier(synthetic_config(), None), L2Classifier)

    def test_forest_threshold_follows_feature_set(self):
        classifier = build_classifier(synthetic_config(classifier="forest", forest_feature_set="eigen"), None)
        assert isinstance(classifier, ForestClassifier)
        assert classifier.w_threshold == pytest.approx(0.81)

    def test_feature_count_mismatch(self, rng):
        data = TrainingSet(rng.random((40, 31)), np.arange(40) % 2 == 0)
        model = train(data, n_trees=2, feature_set=FeatureSet.EIGEN)
        with pytest.raises(ModelIncompatibleError):
            build_classifier(synthetic_config(classifier="forest"), model)


def test_classify_outcome_gates():
    config = synthetic_config()
    near = LoopClosure(Pose.from_translation((1.5, 0.0, 0.0)), (), 4)
    far = LoopClosure(Pose.from_translation((2.5, 0.0, 0.0)), (), 4)
    turned = LoopClosure(Pose.from_yaw(np.radians(6.0)), (), 4)
    assert classify_outcome(None, Pose.identity(), config) is DetectionOutcome.NONE
    assert classify_outcome(near, Pose.identity(), config) is DetectionOutcome.TRUE_POSITIVE
    assert classify_outcome(far, Pose.identity(), config) is DetectionOutcome.FALSE_POSITIVE
    assert classify_outcome(turned, Pose.identity(), config) is DetectionOutcome.FALSE_POSITIVE


class TestLoopClosure:
    def test_revisit_is_detected(self, revisit):
        config = synthetic_config()
        state = PipelineState()
        target_map = TargetMap.empty(config.target_map_params())
        outcomes = []
        for scan_index, scan, pose in revisit:
            outcome = process_scan(scan, pose, config, target_map, state=state, scan_index=scan_index)
            target_map = outcome.target_map
            outcomes.append(outcome)

        first, empty, again = outcomes
        assert first.closure is None and empty.closure is None
        assert len(first.sources) >= 4
        assert empty.sources == ()

        closure = again.closure
        assert closure is not None
        assert closure.source_scan_index == 2
        assert closure.consensus_size >= 4
        translation_error, rotation_error = pose_error(closure.transform, Pose.identity())
        assert translation_error < 1e-6
        assert rotation_error < 1e-6
        assert again.record.outcome is DetectionOutcome.TRUE_POSITIVE
        assert again.record.travelled == pytest.approx(60.0)
        assert again.record.distance_since_detection == 0.0
        assert 0 < again.record.target_segments <= len(first.sources)

    def test_recent_segments_are_not_targets(self, synthetic_scan):
        scan, pose = synthetic_scan
        config = synthetic_config()
        state = PipelineState()
        target_map = TargetMap.empty(config.target_map_params())
        for scan_index in range(2):
            outcome = process_scan(scan, pose, config, target_map, state=state, scan_index=scan_index)
            target_map = outcome.target_map
            assert outcome.closure is None
            assert outcome.record.target_segments == 0

    def test_source_ids_continue_across_scans(self, revisit):
        config = synthetic_config()
        state = PipelineState()
        target_map = TargetMap.empty(config.target_map_params())
        seen = []
        for scan_index, scan, pose in revisit:
            outcome = process_scan(scan, pose, config, target_map, state=state, scan_index=scan_index)
            target_map = outcome.target_map
            seen.extend(s.id for s in outcome.sources)
        assert len(seen) == len(set(seen))
        assert all(s.creation_index in (0, 2) for s in target_map)

    def test_replaced_views_leave_the_map_after_one_more_window(self, revisit, synthetic_scan):
        _, pose = synthetic_scan
        config = synthetic_config()
        state = PipelineState()
        target_map = TargetMap.empty(config.target_map_params())
        empty = PointCloud(np.empty((0, 3)), "sensor")
        for scan_index, scan, scan_pose in revisit + [(3, empty, shifted(pose, 60.0))]:
            target_map = process_scan(scan, scan_pose, config, target_map, state=state, scan_index=scan_index).target_map
        assert len(target_map) > 0
        assert all(s.creation_index == 2 for s in target_map)
        centroids = target_map.centroids()
        gaps = np.linalg.norm(centroids[:, None] - centroids[None], axis=-1)[np.triu_indices(len(centroids), 1)]
        assert np.all(gaps > config.target_map_params().duplicate_distance)

    def test_stage_timings_are_recorded(self, synthetic_scan):
        scan, pose = synthetic_scan
        outcome = process_scan(scan, pose, synthetic_config(), TargetMap.empty())
        assert set(outcome.record.timings_ms) == set(PipelineStage)
        assert all(value >= 0.0 for value in outcome.record.timings_ms.values())
        assert outcome.stage_runs == {stage: 1 for stage in PipelineStage}


class TestLocalization:
    def test_offset_map_is_recovered(self, synthetic_scan, tmp_path):
        scan, pose = synthetic_scan
        config = synthetic_config()
        built = process_scan(scan, pose, config, TargetMap.empty(config.target_map_params())).target_map
        moved = TargetMap({s.id: s.transformed(OFFSET) for s in built}, built.params, built.next_id)
        path = tmp_path / "map.segmap"
        save_map(moved, path)
        prior = load_map(path)

        outcome = process_scan(scan, pose, synthetic_config(mode="localization"), prior, expected=OFFSET)
        assert outcome.closure is not None
        np.testing.assert_allclose(outcome.closure.transform.translation, [1.0, -0.5, 0.0], atol=1e-6)
        assert outcome.record.outcome is DetectionOutcome.TRUE_POSITIVE
        assert outcome.target_map is prior

    def test_empty_prior_map(self, synthetic_scan):
        scan, pose = synthetic_scan
        outcome = process_scan(scan, pose, synthetic_config(mode="localization"), TargetMap.empty())
        assert outcome.closure is None
        assert len(outcome.target_map) == 0


class TestSegMatchPipeline:
    def test_run_collects_records_and_closures(self, revisit):
        pipeline = SegMatchPipeline(synthetic_config())
        outcomes = list(pipeline.run(revisit))
        assert len(outcomes) == 3
        assert [r.scan_index for r in pipeline.records] == [0, 1, 2]
        assert [c.source_scan_index for c in pipeline.closures] == [2]
        assert pipeline.state.stage_runs[PipelineStage.SEGMENTATION] == 3

    def test_scan_spacing_skips_close_scans(self, synthetic_scan):
        scan, pose = synthetic_scan
        pipeline = SegMatchPipeline(synthetic_config(scan_spacing=1.0))
        sequence = [(0, scan, pose), (1, scan, shifted(pose, 0.5)), (2, scan, shifted(pose, 1.2))]
        list(pipeline.run(sequence))
        assert [r.scan_index for r in pipeline.records] == [0, 2]

    def test_trajectory_update_moves_the_map(self, synthetic_scan):
        scan, pose = synthetic_scan
        pipeline = SegMatchPipeline(synthetic_config())
        pipeline.process(0, scan, pose)
        before = pipeline.target_map.centroids()
        corrected = Trajectory((0,), (shifted(pose, 2.0),))
        after = pipeline.update_trajectory(corrected).centroids()
        np.testing.assert_allclose(after - before, np.tile([2.0, 0.0, 0.0], (len(before), 1)), atol=1e-9)
        assert pipeline.trajectory.pose_at(0).is_identical(corrected.pose_at(0))

    def test_localization_mode_keeps_the_prior(self, synthetic_scan):
        scan, pose = synthetic_scan
        prior = SegMatchPipeline(synthetic_config())
        prior.process(0, scan, pose)
        pipeline = SegMatchPipeline(synthetic_config(mode=PipelineMode.LOCALIZATION), target_map=prior.target_map)
        pipeline.process(0, scan, pose)
        assert pipeline.target_map is prior.target_map
        assert len(pipeline.closures) == 1


class TestTrainingPairs:
    def test_revisit_yields_labelled_pairs(self, revisit):
        config = synthetic_config(classifier="forest")
        training_set = generate_training_pairs(revisit, config)
        assert training_set.negatives <= config.negative_ratio * training_set.positives
        identical = np.all(training_set.features[:, :7] == 0.0, axis=1)
        assert identical.sum() >= 4
        assert training_set.positives >= identical.sum()
        assert np.all(training_set.labels[identical])

    def test_no_revisit(self, synthetic_scan):
        scan, pose = synthetic_scan
        with pytest.raises(TrainingError):
            generate_training_pairs([(0, scan, pose)], synthetic_config(classifier="forest"))




@pytest.fixture(scope="module")
def revisit_model():
    config = synthetic_config(classifier="forest", n_trees=10)
    training_set = generate_training_pairs(revisit_sequence(seed=0, step=4.0), config)
    return train_with_params(training_set, config.forest_params())


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(1, 11))
def test_synthetic_revisit_end_to_end(revisit_model, seed):
    pipeline = SegMatchPipeline(synthetic_config(classifier="forest", n_trees=10), revisit_model)
    outcomes = list(pipeline.run(revisit_sequence(seed=seed, step=4.0)))
    detected = [r.outcome for r in pipeline.records]
    assert detected.count(DetectionOutcome.TRUE_POSITIVE) >= 1
    assert detected.count(DetectionOutcome.FALSE_POSITIVE) == 0
    assert all(outcome.stage_runs == {stage: 1 for stage in PipelineStage} for outcome in outcomes)
    assert pipeline.state.stage_runs[PipelineStage.SEGMENTATION] == len(outcomes)


def evenly_thinned(scan: PointCloud, count: int) -> PointCloud:
    """count points taken at even strides through the scan."""
    return scan.with_points(scan.points[np.linspace(0, len(scan) - 1, count).astype(int)])


@pytest.mark.slow
def test_dense_scan_meets_the_time_budget(rng):
    world = generate_world(seed=7, object_count=40, density=200.0, ground_spacing=0.25)
    sequence = generate_sequence(world, seed=7, sensor_range=60.0, keep_fraction=1.0,
                                 waypoints=[(40.0, 20.0), (44.0, 20.0)])
    assert all(len(scan) >= 100_000 for scan in sequence.scans)

    labels = np.arange(400) % 2 == 0
    model = train(TrainingSet(rng.random((400, PAIR_FEATURE_COUNT)), labels), n_trees=25, seed=0)
    pipeline = SegMatchPipeline(synthetic_config(classifier="forest", cylinder_radius=60.0), model)
    for scan_index, scan, pose in sequence:
        started = time.perf_counter()
        pipeline.process(scan_index, evenly_thinned(scan, 100_000), pose)
        assert time.perf_counter() - started < 2.0

    report = timing_report(pipeline.records)
    assert list(report["stage"]) == [stage.value for stage in TIMED_STAGES] + ["total"]
    assert report["mean_ms"].iloc[-1] < 2000.0
    assert report["std_ms"].notna().all()

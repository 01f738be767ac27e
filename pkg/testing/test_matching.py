import numpy as np
import pytest

from conftest import make_segment
from segmatch.exceptions import ClassifierError, ParameterError, UndescribedSegmentError
from segmatch.forest import PAIR_FEATURE_COUNT, TrainingSet, train
from segmatch.matching import (
    FeatureIndexCache,
    ForestClassifier,
    L2Classifier,
    build_index,
    classify_candidates,
    match_segments,
    pair_feature_matrix,
    retrieve_candidates,
)
from segmatch.models import ESF_BIN_COUNT, ESF_FEATURE_COUNT, Segment

UNIFORM_ESF = np.full(ESF_FEATURE_COUNT, 1.0 / ESF_BIN_COUNT)


def random_targets(rng, count):
    return [make_segment(i, rng.random(7)) for i in range(count)]


class TestRetrieval:
    def test_matches_brute_force(self, rng):
        targets = random_targets(rng, 1000)
        index = build_index(targets)
        eigen = np.stack([t.feature.eigen for t in targets])
        for _ in range(5):
            source = make_segment(5000, rng.random(7))
            candidates = retrieve_candidates(index, source, 10)
            distances = np.linalg.norm(eigen - source.feature.eigen, axis=1)
            expected = np.lexsort((np.arange(1000), distances))[:10]
            assert [c.target_id for c in candidates] == expected.tolist()
            assert [c.distance for c in candidates] == pytest.approx(distances[expected].tolist())

    def test_exact_copy_comes_first(self, rng):
        targets = random_targets(rng, 200)
        source = make_segment(999, targets[37].feature.eigen)
        first = retrieve_candidates(build_index(targets), source, 5)[0]
        assert first.target_id == 37
        assert first.distance == 0.0

    def test_ties_prefer_lower_ids(self):
        eigen = np.full(7, 0.2)
        targets = [make_segment(i, eigen) for i in (9, 4, 7)] + [make_segment(1, np.full(7, 0.9))]
        candidates = retrieve_candidates(build_index(targets), make_segment(100, eigen), 2)
        assert [c.target_id for c in candidates] == [4, 7]

    def test_fewer_targets_than_k(self, rng):
        candidates = retrieve_candidates(build_index(random_targets(rng, 3)), make_segment(9, rng.random(7)), 50)
        assert len(candidates) == 3

    def test_empty_index(self, rng):
        assert retrieve_candidates(build_index([]), make_segment(0, rng.random(7)), 5) == []

    def test_invalid_k(self, rng):
        with pytest.raises(ParameterError):
            retrieve_candidates(build_index(random_targets(rng, 3)), make_segment(9, rng.random(7)), 0)

    def test_undescribed_segments_are_rejected(self, rng):
        bare = Segment.from_points(0, rng.random((10, 3)))
        with pytest.raises(UndescribedSegmentError):
            build_index([bare])
        with pytest.raises(UndescribedSegmentError):
            retrieve_candidates(build_index(random_targets(rng, 3)), bare, 2)

    def test_duplicate_target_ids(self, rng):
        with pytest.raises(ParameterError):
            build_index([make_segment(1, rng.random(7)), make_segment(1, rng.random(7))])


class TestL2Classifier:
    def test_threshold_drops_far_pairs(self):
        target = make_segment(1, np.zeros(7))
        near = make_segment(10, np.array([0.002, 0, 0, 0, 0, 0, 0]))
        far = make_segment(11, np.array([0.003, 0, 0, 0, 0, 0, 0]))
        index = build_index([target])
        matches = match_segments([near, far], index, 1, L2Classifier(0.0024))
        assert [m.source_id for m in matches] == [10]
        assert matches[0].score == pytest.approx(1.0 / 6.0)

    def test_exact_match_scores_one(self):
        target = make_segment(1, np.full(7, 0.3), centroid=(5.0, 0.0, 0.0))
        source = make_segment(2, np.full(7, 0.3), centroid=(1.0, 1.0, 0.0))
        (match,) = match_segments([source], build_index([target]), 1, L2Classifier(0.1))
        assert match.score == 1.0
        np.testing.assert_array_equal(match.source_centroid, source.centroid)
        np.testing.assert_array_equal(match.target_centroid, target.centroid)

    def test_non_positive_threshold(self):
        with pytest.raises(ParameterError):
            L2Classifier(0.0)


@pytest.fixture(scope="module")
def separating_model():
    rng = np.random.Generator(np.random.PCG64(8))
    features = rng.random((600, PAIR_FEATURE_COUNT))
    labels = np.arange(600) < 300
    # matching pairs: equal eigen blocks and fully overlapping histograms
    features[labels, :7] = 0.0
    features[labels, 21:] = 1.0
    features[~labels, :7] = 0.5 + 0.5 * features[~labels, :7]
    features[~labels, 21:] *= 0.5
    return train(TrainingSet(features, labels), n_trees=10, seed=0)


class TestForestClassifier:
    def test_identical_segments_score_high(self, separating_model, rng):
        eigen = rng.random(7)
        target = make_segment(1, eigen, esf=UNIFORM_ESF)
        source = make_segment(2, eigen, esf=UNIFORM_ESF)
        (match,) = match_segments([source], build_index([target]), 1, ForestClassifier(separating_model, 0.7))
        assert match.score >= 0.9

    def test_dissimilar_segments_are_dropped(self, separating_model):
        esf = np.zeros(ESF_FEATURE_COUNT)
        esf[::ESF_BIN_COUNT] = 1.0
        target = make_segment(1, np.zeros(7), esf=UNIFORM_ESF)
        source = make_segment(2, np.ones(7), esf=esf)
        assert match_segments([source], build_index([target]), 1, ForestClassifier(separating_model, 0.7)) == []

    def test_missing_model(self, rng):
        target = make_segment(1, rng.random(7))
        with pytest.raises(ClassifierError):
            match_segments([make_segment(2, rng.random(7))], build_index([target]), 1, ForestClassifier(None, 0.5))

    def test_threshold_range(self, separating_model):
        with pytest.raises(ParameterError):
            ForestClassifier(separating_model, 1.5)


class TestClassification:
    def test_empty_input(self):
        assert classify_candidates([], L2Classifier(1.0)) == []

    def test_no_classifier(self, rng):
        pairs = retrieve_candidates(build_index(random_targets(rng, 2)), make_segment(9, rng.random(7)), 1)
        with pytest.raises(ClassifierError):
            classify_candidates(pairs, None)

    def test_order_follows_sources(self, rng):
        targets = random_targets(rng, 20)
        sources = [make_segment(100 + i, t.feature.eigen) for i, t in enumerate(targets[:5])]
        matches = match_segments(sources, build_index(targets), 3, L2Classifier(1e-9))
        assert [(m.source_id, m.target_id) for m in matches] == [(100 + i, i) for i in range(5)]

    def test_pair_feature_matrix_rows(self, rng):
        targets = random_targets(rng, 4)
        pairs = retrieve_candidates(build_index(targets), make_segment(9, rng.random(7)), 4)
        matrix = pair_feature_matrix(pairs)
        assert matrix.shape == (4, PAIR_FEATURE_COUNT)
        for row, pair in zip(matrix, pairs):
            np.testing.assert_allclose(row[:7], np.abs(pair.source.feature.eigen - pair.target.feature.eigen))


class TestFeatureIndexCache:
    def test_rebuild_policy(self, rng):
        targets = {s.id: s for s in random_targets(rng, 10)}
        cache = FeatureIndexCache(growth_factor=0.1)
        assert len(cache.get(targets)) == 10
        assert cache.rebuilds == 1

        targets[10] = make_segment(10, rng.random(7))
        index = cache.get(targets)
        assert cache.rebuilds == 1
        assert 10 not in index

        targets[11] = make_segment(11, rng.random(7))
        assert 11 in cache.get(targets)
        assert cache.rebuilds == 2

        del targets[3]
        assert 3 not in cache.get(targets)
        assert cache.rebuilds == 3

    def test_replaced_segment_triggers_rebuild(self, rng):
        targets = {s.id: s for s in random_targets(rng, 5)}
        cache = FeatureIndexCache()
        cache.get(targets)
        targets[2] = make_segment(2, rng.random(7))
        assert cache.get(targets).segment(2) is targets[2]
        assert cache.rebuilds == 2

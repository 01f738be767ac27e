import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import ClassifierError, ParameterError, UndescribedSegmentError
from .forest import ForestModel, build_pair_features
from .models import EIGEN_FEATURE_COUNT, CandidateMatch, Segment

logger = logging.getLogger("segmatch.matching")

# relative slack on the k-th distance so that every tie at that distance is collected
_TIE_SLACK = 1e-9


def _require_described(segment: Segment) -> None:
    if segment.feature is None:
        raise UndescribedSegmentError(f"segment {segment.id} has no feature vector")


class CandidatePair(NamedTuple):
    source: Segment
    target: Segment
    distance: float

    @property
    def target_id(self) -> int:
        return self.target.id


class FeatureIndex:
    """Immutable k-NN index over the eigenvalue block of a set of target segments."""

    def __init__(self, targets: Iterable[Segment]):
        targets = list(targets)
        for segment in targets:
            _require_described(segment)
        self._segments: Dict[int, Segment] = {}
        for segment in targets:
            if segment.id in self._segments:
                raise ParameterError(f"segment id {segment.id} appears twice in the index")
            self._segments[segment.id] = segment
        self.ids = np.array([s.id for s in targets], dtype=np.int64)
        if targets:
            self.eigen = np.stack([s.feature.eigen for s in targets])
        else:
            self.eigen = np.empty((0, EIGEN_FEATURE_COUNT))
        self.ids.setflags(write=False)
        self.eigen.setflags(write=False)
        self._tree = cKDTree(self.eigen) if targets else None

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, segment_id: int) -> bool:
        return segment_id in self._segments

    def segment(self, segment_id: int) -> Segment:
        return self._segments[segment_id]

    def segments(self) -> List[Segment]:
        return list(self._segments.values())

    def query(self, eigen: np.ndarray, k: int) -> np.ndarray:
        """Row positions of the min(k, N) nearest entries, ordered by (distance, id)."""
        if k < 1:
            raise ParameterError(f"k must be >= 1, got {k}")
        count = min(k, len(self))
        if count == 0:
            return np.empty(0, dtype=np.int64)
        eigen = np.asarray(eigen, dtype=np.float64)
        distances, _ = self._tree.query(eigen, k=count)
        kth = float(np.atleast_1d(distances)[-1])
        within = np.asarray(self._tree.query_ball_point(eigen, r=kth * (1 + _TIE_SLACK) + 1e-300), dtype=np.int64)
        exact = np.linalg.norm(self.eigen[within] - eigen, axis=1)
        order = np.lexsort((self.ids[within], exact))
        return within[order[:count]]

    def distances(self, eigen: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.eigen[rows] - np.asarray(eigen, dtype=np.float64), axis=1)


def build_index(targets: Iterable[Segment]) -> FeatureIndex:
    return FeatureIndex(targets)


def retrieve_candidates(index: FeatureIndex, source: Segment, k: int) -> List[CandidatePair]:
    """The min(k, |index|) nearest targets in eigen space, ascending distance, ties by lower id."""
    _require_described(source)
    rows = index.query(source.feature.eigen, k)
    distances = index.distances(source.feature.eigen, rows)
    return [
        CandidatePair(source, index.segment(int(index.ids[row])), float(distance))
        for row, distance in zip(rows, distances)
    ]


# --- Classifiers ---

@dataclass(frozen=True)
class L2Classifier:
    """Hard threshold on the eigen-space distance; score = 1 - d / threshold."""
    threshold: float

    def __post_init__(self):
        if self.threshold <= 0:
            raise ParameterError(f"L2 threshold must be positive, got {self.threshold}")

    def scores(self, pairs: Sequence[CandidatePair]) -> np.ndarray:
        distances = np.array([p.distance for p in pairs], dtype=np.float64)
        return 1.0 - distances / self.threshold

    def keep(self, pairs: Sequence[CandidatePair], scores: np.ndarray) -> np.ndarray:
        distances = np.array([p.distance for p in pairs], dtype=np.float64)
        return distances <= self.threshold


@dataclass(frozen=True)
class ForestClassifier:
    """Keeps pairs whose forest score w reaches w_threshold."""
    model: Optional[ForestModel]
    w_threshold: float

    def __post_init__(self):
        if not 0.0 <= self.w_threshold <= 1.0:
            raise ParameterError(f"forest threshold must lie in [0, 1], got {self.w_threshold}")

    def scores(self, pairs: Sequence[CandidatePair]) -> np.ndarray:
        if self.model is None:
            raise ClassifierError("forest classification requested without a trained model")
        return self.model.score_many(pair_feature_matrix(pairs))

    def keep(self, pairs: Sequence[CandidatePair], scores: np.ndarray) -> np.ndarray:
        return scores >= self.w_threshold


Classifier = Union[L2Classifier, ForestClassifier]


def pair_feature_matrix(pairs: Sequence[CandidatePair]) -> np.ndarray:
    for pair in pairs:
        _require_described(pair.source)
        _require_described(pair.target)
    return build_pair_features(
        np.stack([p.source.feature.eigen for p in pairs]),
        np.stack([p.target.feature.eigen for p in pairs]),
        np.stack([p.source.feature.esf for p in pairs]),
        np.stack([p.target.feature.esf for p in pairs]),
    )


def classify_candidates(pairs: Sequence[CandidatePair], classifier: Optional[Classifier]) -> List[CandidateMatch]:
    """Score every pair and keep those the classifier accepts, input order preserved."""
    if classifier is None:
        raise ClassifierError("no classifier configured")
    if not pairs:
        return []
    scores = classifier.scores(pairs)
    keep = classifier.keep(pairs, scores)
    scores = np.clip(scores, 0.0, 1.0)
    return [
        CandidateMatch(
            source_id=pair.source.id,
            target_id=pair.target.id,
            score=float(score),
            source_centroid=pair.source.centroid,
            target_centroid=pair.target.centroid,
        )
        for pair, score, kept in zip(pairs, scores, keep)
        if kept
    ]


def match_segments(
    sources: Sequence[Segment],
    index: FeatureIndex,
    k: int,
    classifier: Optional[Classifier],
) -> List[CandidateMatch]:
    """Retrieve and classify candidates for every source segment."""
    pairs: List[CandidatePair] = []
    for source in sources:
        pairs.extend(retrieve_candidates(index, source, k))
    matches = classify_candidates(pairs, classifier)
    logger.debug(f"Matching: {len(sources)} sources, {len(pairs)} retrieved pairs, {len(matches)} accepted")
    return matches


class FeatureIndexCache:
    """Keeps a FeatureIndex over a changing target set.

    The index is rebuilt when an indexed segment was removed or replaced, or
    when the target set grew by more than growth_factor since the last build.
    Targets added below that growth are not searchable until the next rebuild.
    """

    def __init__(self, growth_factor: float = 0.1):
        self.growth_factor = growth_factor
        self.index: FeatureIndex = FeatureIndex([])
        self.rebuilds = 0

    def _stale(self, targets: Mapping[int, Segment]) -> bool:
        if len(self.index) == 0:
            return len(targets) > 0
        for segment_id in self.index.ids:
            current = targets.get(int(segment_id))
            if current is None or current is not self.index.segment(int(segment_id)):
                return True
        return len(targets) > (1.0 + self.growth_factor) * len(self.index)

    def get(self, targets: Mapping[int, Segment]) -> FeatureIndex:
        if self._stale(targets):
            self.index = FeatureIndex(targets[i] for i in sorted(targets))
            self.rebuilds += 1
            logger.debug(f"Feature index rebuilt over {len(self.index)} targets")
        return self.index

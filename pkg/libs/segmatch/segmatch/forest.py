"""Random-forest match classifier over segment pair features.

PairFeature layout (31 columns):
    0..6    |f_i - f_j| over the eigenvalue block
    7..13   f_i eigenvalue block
    14..20  f_j eigenvalue block
    21..30  histogram intersection of each of the 10 shape blocks

An `eigen` model uses the first 21 columns, an `eigen+shapes` model all 31.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .codec import BinaryReader, BinaryWriter
from .exceptions import (
    ModelFormatError,
    ModelIncompatibleError,
    ModelVersionError,
    ParameterError,
    TrainingError,
)
from .models import EIGEN_FEATURE_COUNT, ESF_BIN_COUNT, ESF_HISTOGRAM_COUNT, FeatureVector
from .schemas import FeatureSet, ForestParams

logger = logging.getLogger("segmatch.forest")

PAIR_FEATURE_COUNT = 3 * EIGEN_FEATURE_COUNT + ESF_HISTOGRAM_COUNT
MODEL_MAGIC = b"SEGRF1"
MODEL_VERSION = 1

_LEAF = -1
_NODE_LEAF, _NODE_SPLIT = 0, 1


# --- Pair features ---

def build_pair_features(
    eigen_i: np.ndarray,
    eigen_j: np.ndarray,
    esf_i: np.ndarray,
    esf_j: np.ndarray,
) -> np.ndarray:
    """Batched pair features; inputs are (M, 7) eigen and (M, 640) shape blocks."""
    eigen_i = np.atleast_2d(eigen_i)
    eigen_j = np.atleast_2d(eigen_j)
    blocks_i = np.atleast_2d(esf_i).reshape(-1, ESF_HISTOGRAM_COUNT, ESF_BIN_COUNT)
    blocks_j = np.atleast_2d(esf_j).reshape(-1, ESF_HISTOGRAM_COUNT, ESF_BIN_COUNT)
    intersections = np.minimum(blocks_i, blocks_j).sum(axis=2)
    return np.hstack([np.abs(eigen_i - eigen_j), eigen_i, eigen_j, intersections])


def build_pair_feature(f_i: FeatureVector, f_j: FeatureVector) -> np.ndarray:
    return build_pair_features(f_i.eigen, f_j.eigen, f_i.esf, f_j.esf)[0]


# --- Training data ---

@dataclass(frozen=True, eq=False)
class TrainingSet:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        if features.size == 0:
            features = features.reshape(0, PAIR_FEATURE_COUNT)
        labels = np.array(self.labels, dtype=bool).reshape(-1)
        if features.ndim != 2 or features.shape[1] != PAIR_FEATURE_COUNT:
            raise ParameterError(f"pair features must have shape (M, {PAIR_FEATURE_COUNT}), got {features.shape}")
        if len(features) != len(labels):
            raise ParameterError(f"{len(features)} pair features for {len(labels)} labels")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_pairs(cls, samples: Sequence[Tuple[np.ndarray, bool]]) -> "TrainingSet":
        if not samples:
            return cls(np.empty((0, PAIR_FEATURE_COUNT)), np.empty(0, dtype=bool))
        features, labels = zip(*samples)
        return cls(np.stack(features), np.array(labels, dtype=bool))

    @classmethod
    def concatenate(cls, sets: Sequence["TrainingSet"]) -> "TrainingSet":
        if not sets:
            return cls.from_pairs([])
        return cls(np.vstack([s.features for s in sets]), np.concatenate([s.labels for s in sets]))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def positives(self) -> int:
        return int(np.count_nonzero(self.labels))

    @property
    def negatives(self) -> int:
        return len(self) - self.positives

    def _subset(self, indices: np.ndarray) -> "TrainingSet":
        return TrainingSet(self.features[indices], self.labels[indices])

    def subsample_negatives(self, ratio: int, seed: int = 0) -> "TrainingSet":
        """Keep every positive and at most ratio * positives negatives, original order preserved."""
        if ratio < 1:
            raise ParameterError(f"negative ratio must be >= 1, got {ratio}")
        negative_idx = np.flatnonzero(~self.labels)
        budget = ratio * self.positives
        if len(negative_idx) <= budget:
            return self
        rng = np.random.Generator(np.random.PCG64(seed))
        kept = rng.choice(negative_idx, size=budget, replace=False)
        keep = np.sort(np.concatenate([np.flatnonzero(self.labels), kept]))
        logger.debug(f"Subsampled negatives {len(negative_idx)} -> {budget} (1:{ratio})")
        return self._subset(keep)

    def split(self, holdout: float, seed: int = 0) -> Tuple["TrainingSet", "TrainingSet"]:
        """Random (train, held-out) split with round(holdout * M) held-out samples."""
        if not 0 < holdout < 1:
            raise ParameterError(f"holdout fraction must lie in (0, 1), got {holdout}")
        rng = np.random.Generator(np.random.PCG64(seed))
        order = rng.permutation(len(self))
        n_holdout = int(round(holdout * len(self)))
        return self._subset(np.sort(order[n_holdout:])), self._subset(np.sort(order[:n_holdout]))


# --- Model ---

@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Binary tree in pre-order arrays; feature == -1 marks a leaf."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __len__(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depths = np.zeros(len(self), dtype=np.int64)
        for node in range(len(self)):
            if self.feature[node] != _LEAF:
                depths[self.left[node]] = depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Leaf match fraction for each row; samples with x <= threshold go left."""
        node = np.zeros(len(features), dtype=np.int64)
        active = self.feature[node] != _LEAF
        while np.any(active):
            rows = np.flatnonzero(active)
            current = node[rows]
            go_left = features[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active[rows] = self.feature[node[rows]] != _LEAF
        return self.value[node]


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: Tuple[DecisionTree, ...]
    feature_count: int
    seed: int
    max_depth: int
    min_leaf: int
    importances: np.ndarray

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def feature_set(self) -> FeatureSet:
        return FeatureSet.EIGEN if self.feature_count == FeatureSet.EIGEN.column_count else FeatureSet.EIGEN_SHAPES

    def score_many(self, pairs: np.ndarray) -> np.ndarray:
        """Mean leaf vote over trees for each 31-column pair feature row."""
        pairs = np.atleast_2d(np.asarray(pairs, dtype=np.float64))
        if pairs.shape[1] < self.feature_count:
            raise ModelIncompatibleError(
                f"model expects {self.feature_count} pair features, got {pairs.shape[1]}"
            )
        if len(pairs) == 0:
            return np.empty(0)
        columns = pairs[:, :self.feature_count]
        votes = np.stack([tree.predict(columns) for tree in self.trees])
        # sorted before summation so the score does not depend on tree order
        return np.clip(np.sort(votes, axis=0).sum(axis=0) / self.n_trees, 0.0, 1.0)


def score(model: ForestModel, pair: np.ndarray) -> float:
    return float(model.score_many(np.asarray(pair).reshape(1, -1))[0])


def feature_importances(model: ForestModel) -> np.ndarray:
    """Normalized total Gini decrease per feature column of the model.

    Sums to 1, except for a forest in which no tree split: then every entry is 0.
    """
    return model.importances.copy()


# --- Training ---

class _TreeBuilder:
    def __init__(self, features: np.ndarray, labels: np.ndarray, max_depth: int, min_leaf: int,
                 mtry: int, rng: np.random.Generator):
        self.features = features
        self.labels = labels.astype(np.float64)
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.mtry = mtry
        self.rng = rng
        self.importances = np.zeros(features.shape[1])
        self._feature, self._threshold, self._left, self._right, self._value = [], [], [], [], []

    def _new_node(self) -> int:
        self._feature.append(_LEAF)
        self._threshold.append(0.0)
        self._left.append(-1)
        self._right.append(-1)
        self._value.append(0.0)
        return len(self._feature) - 1

    def _best_split(self, rows: np.ndarray, parent_gini: float) -> Optional[Tuple[int, float, float, np.ndarray]]:
        n = len(rows)
        y = self.labels[rows]
        candidates = np.sort(self.rng.choice(self.features.shape[1], size=self.mtry, replace=False))
        best = None
        for feature in candidates:
            x = self.features[rows, feature]
            order = np.argsort(x, kind="stable")
            xs, ys = x[order], y[order]
            # split position i puts xs[:i] left
            positions = np.arange(self.min_leaf, n - self.min_leaf + 1)
            positions = positions[(positions > 0) & (positions < n)]
            positions = positions[xs[positions - 1] < xs[positions]]
            if len(positions) == 0:
                continue
            cum_pos = np.cumsum(ys)
            left_pos = cum_pos[positions - 1]
            left_n = positions.astype(np.float64)
            right_n = n - left_n
            p_left = left_pos / left_n
            p_right = (cum_pos[-1] - left_pos) / right_n
            weighted = (left_n * 2 * p_left * (1 - p_left) + right_n * 2 * p_right * (1 - p_right)) / n
            decrease = parent_gini - weighted
            pick = int(np.argmax(decrease))
            if decrease[pick] <= 0:
                continue
            if best is None or decrease[pick] > best[2]:
                i = positions[pick]
                threshold = 0.5 * (xs[i - 1] + xs[i])
                if threshold >= xs[i]:
                    threshold = xs[i - 1]
                best = (int(feature), float(threshold), float(decrease[pick]), x <= threshold)
        return best

    def build(self, rows: np.ndarray, depth: int = 0) -> int:
        node = self._new_node()
        p = float(self.labels[rows].mean()) if len(rows) else 0.0
        self._value[node] = p
        if depth >= self.max_depth or len(rows) < 2 * self.min_leaf or p in (0.0, 1.0):
            return node
        parent_gini = 2 * p * (1 - p)
        split = self._best_split(rows, parent_gini)
        if split is None:
            return node
        feature, threshold, decrease, go_left = split
        self.importances[feature] += decrease * len(rows)
        self._feature[node] = feature
        self._threshold[node] = threshold
        self._left[node] = self.build(rows[go_left], depth + 1)
        self._right[node] = self.build(rows[~go_left], depth + 1)
        return node

    def tree(self) -> DecisionTree:
        return DecisionTree(
            feature=np.array(self._feature, dtype=np.int32),
            threshold=np.array(self._threshold, dtype=np.float64),
            left=np.array(self._left, dtype=np.int32),
            right=np.array(self._right, dtype=np.int32),
            value=np.array(self._value, dtype=np.float64),
        )


def train(
    training_set: TrainingSet,
    n_trees: int = 25,
    max_depth: int = 20,
    min_leaf: int = 5,
    seed: int = 0,
    feature_set: FeatureSet = FeatureSet.EIGEN_SHAPES,
    workers: int = 1,
) -> ForestModel:
    """Train a forest of Gini trees on bootstrap samples.

    Each tree draws its bootstrap and per-node feature subsets (ceil(sqrt(d))
    columns) from its own generator spawned from seed, so the model depends
    only on (training_set, parameters, seed) and not on workers.
    """
    if n_trees < 1 or max_depth < 0 or min_leaf < 1:
        raise ParameterError(f"invalid forest parameters n_trees={n_trees} max_depth={max_depth} min_leaf={min_leaf}")
    if training_set.positives == 0 or training_set.negatives == 0:
        raise TrainingError(
            f"training set needs both labels (positives={training_set.positives}, "
            f"negatives={training_set.negatives})"
        )
    feature_count = feature_set.column_count
    features = training_set.features[:, :feature_count]
    labels = training_set.labels
    mtry = math.ceil(math.sqrt(feature_count))
    n_samples = len(training_set)
    tree_seeds = np.random.SeedSequence(seed).spawn(n_trees)

    def grow(tree_seed: np.random.SeedSequence) -> Tuple[DecisionTree, np.ndarray]:
        rng = np.random.Generator(np.random.PCG64(tree_seed))
        bootstrap = rng.integers(0, n_samples, size=n_samples)
        builder = _TreeBuilder(features[bootstrap], labels[bootstrap], max_depth, min_leaf, mtry, rng)
        builder.build(np.arange(n_samples))
        return builder.tree(), builder.importances

    logger.info(
        f"Training {n_trees} trees on {n_samples} pairs "
        f"({training_set.positives} positive, {feature_set.value}, seed={seed})"
    )
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            grown: List[Tuple[DecisionTree, np.ndarray]] = list(executor.map(grow, tree_seeds))
    else:
        grown = [grow(s) for s in tree_seeds]

    total = np.sum([imp for _, imp in grown], axis=0)
    # a forest of single leaves has no Gini decrease to share out
    importances = total / total.sum() if total.sum() > 0 else np.zeros(feature_count)
    return ForestModel(
        trees=tuple(tree for tree, _ in grown),
        feature_count=feature_count,
        seed=seed,
        max_depth=max_depth,
        min_leaf=min_leaf,
        importances=importances,
    )


def train_with_params(training_set: TrainingSet, params: ForestParams) -> ForestModel:
    return train(
        training_set,
        n_trees=params.n_trees,
        max_depth=params.max_depth,
        min_leaf=params.min_leaf,
        seed=params.seed,
        feature_set=params.feature_set,
        workers=params.workers,
    )


# --- Persistence ---

def model_to_bytes(model: ForestModel) -> bytes:
    writer = BinaryWriter().raw(MODEL_MAGIC).pack("H", MODEL_VERSION)
    writer.pack("IIqII", model.feature_count, model.n_trees, model.seed, model.max_depth, model.min_leaf)
    writer.array(model.importances)
    for tree in model.trees:
        writer.pack("I", len(tree))
        for node in range(len(tree)):
            if tree.feature[node] == _LEAF:
                writer.pack("Bd", _NODE_LEAF, tree.value[node])
            else:
                writer.pack("Bid", _NODE_SPLIT, tree.feature[node], tree.threshold[node])
    return writer.getvalue()


def _read_tree(reader: BinaryReader, feature_count: int) -> DecisionTree:
    (node_count,) = reader.unpack("I", "tree node count")
    if node_count == 0:
        raise ModelFormatError("tree with zero nodes")
    feature = np.full(node_count, _LEAF, dtype=np.int32)
    threshold = np.zeros(node_count)
    left = np.full(node_count, -1, dtype=np.int32)
    right = np.full(node_count, -1, dtype=np.int32)
    value = np.zeros(node_count)
    # parents whose right child is still pending, in pre-order
    pending: List[int] = []
    for node in range(node_count):
        if node > 0:
            if not pending:
                raise ModelFormatError("tree node sequence is not a valid pre-order encoding")
            parent = pending[-1]
            if left[parent] < 0:
                left[parent] = node
            else:
                right[parent] = node
                pending.pop()
        (kind,) = reader.unpack("B", "node kind")
        if kind == _NODE_LEAF:
            (leaf_value,) = reader.unpack("d", "leaf value")
            if not 0.0 <= leaf_value <= 1.0:
                raise ModelFormatError(f"leaf value {leaf_value} outside [0, 1]")
            value[node] = leaf_value
        elif kind == _NODE_SPLIT:
            split_feature, split_threshold = reader.unpack("id", "split node")
            if not 0 <= split_feature < feature_count:
                raise ModelFormatError(f"split feature {split_feature} outside [0, {feature_count})")
            feature[node] = split_feature
            threshold[node] = split_threshold
            pending.append(node)
        else:
            raise ModelFormatError(f"unknown node kind {kind}")
    if pending:
        raise ModelFormatError("tree ends with unfinished split nodes")
    return DecisionTree(feature, threshold, left, right, value)


def model_from_bytes(payload: bytes, expected_feature_count: Optional[int] = None,
                     source: str = "<bytes>") -> ForestModel:
    reader = BinaryReader(payload, ModelFormatError, source)
    if reader.raw(len(MODEL_MAGIC), "magic") != MODEL_MAGIC:
        raise ModelFormatError(f"{source}: not a SEGRF1 model file")
    (version,) = reader.unpack("H", "version")
    if version != MODEL_VERSION:
        raise ModelVersionError(f"{source}: model format version {version} is not supported (expected {MODEL_VERSION})")
    feature_count, n_trees, seed, max_depth, min_leaf = reader.unpack("IIqII", "header")
    if feature_count not in (FeatureSet.EIGEN.column_count, FeatureSet.EIGEN_SHAPES.column_count):
        raise ModelFormatError(f"{source}: unsupported feature count {feature_count}")
    if expected_feature_count is not None and feature_count != expected_feature_count:
        raise ModelIncompatibleError(
            f"{source}: model was trained on {feature_count} pair features, {expected_feature_count} expected"
        )
    if n_trees == 0:
        raise ModelFormatError(f"{source}: model has no trees")
    importances = reader.array(feature_count, what="importances")
    trees = tuple(_read_tree(reader, feature_count) for _ in range(n_trees))
    reader.expect_end()
    return ForestModel(trees, feature_count, seed, max_depth, min_leaf, importances)


def save_model(model: ForestModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(model_to_bytes(model))
    logger.info(f"Saved {model.n_trees}-tree model ({model.feature_set.value}) to {path}")


def load_model(path: Union[str, Path], expected_feature_count: Optional[int] = None) -> ForestModel:
    model = model_from_bytes(Path(path).read_bytes(), expected_feature_count, source=str(path))
    logger.info(f"Loaded {model.n_trees}-tree model ({model.feature_set.value}) from {path}")
    return model

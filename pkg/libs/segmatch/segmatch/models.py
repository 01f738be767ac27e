"""Immutable value types shared by every stage.

Arrays held by these types are marked read-only on construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
from typing_extensions import TypeAlias

from .exceptions import ParameterError, PoseError, TrajectoryError, DescriptorError

# A Point3 is a float64 array of shape (3,)
Point3: TypeAlias = np.ndarray

EIGEN_FEATURE_COUNT = 7
ESF_HISTOGRAM_COUNT = 10
ESF_BIN_COUNT = 64
ESF_FEATURE_COUNT = ESF_HISTOGRAM_COUNT * ESF_BIN_COUNT

ESF_BLOCK_NAMES = (
    "d2_in", "d2_out", "d2_mixed", "d2_ratio",
    "d3_in", "d3_out", "d3_mixed",
    "a3_in", "a3_out", "a3_mixed",
)
EIGEN_FEATURE_NAMES = (
    "linearity", "planarity", "scattering", "omnivariance",
    "anisotropy", "eigenentropy", "change_of_curvature",
)

FEATURE_VECTOR_TAG = b"SEGFV1"
ORTHONORMAL_TOLERANCE = 1e-9


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def as_point3(value) -> Point3:
    point = np.array(value, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(point)):
        raise ParameterError(f"point coordinates must be finite, got {point}")
    return _frozen(point)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame_id: str = "world"

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.size == 0:
            points = points.reshape(0, 3)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ParameterError(f"point array must have shape (N, 3), got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ParameterError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(points))

    @classmethod
    def empty(cls, frame_id: str = "world") -> "PointCloud":
        return cls(np.empty((0, 3)), frame_id)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.points)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.frame_id)

    def centroid(self) -> Point3:
        if len(self) == 0:
            raise ParameterError("centroid of an empty point cloud is undefined")
        return _frozen(self.points.mean(axis=0))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform p -> R p + t."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise PoseError("pose contains non-finite values")
        deviation = np.max(np.abs(rotation @ rotation.T - np.eye(3)))
        if deviation > ORTHONORMAL_TOLERANCE:
            raise PoseError(f"rotation is not orthonormal (max |R R^T - I| = {deviation:.3e})")
        if np.linalg.det(rotation) <= 0:
            raise PoseError("rotation has a non-positive determinant")
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "translation", _frozen(translation))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, translation) -> "Pose":
        return cls(np.eye(3), translation)

    @classmethod
    def from_matrix(cls, matrix) -> "Pose":
        """Build from a 3x4 [R|t] or 4x4 homogeneous matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise PoseError(f"expected a 3x4 or 4x4 matrix, got shape {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rotation, translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rotation_t = self.rotation.T
        return Pose(rotation_t, -rotation_t @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return self ∘ other (apply other first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        """Angle of the rotation part in radians."""
        r = self.rotation
        axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        # sin from the skew part, cos from the trace
        return float(np.arctan2(0.5 * np.linalg.norm(axis), 0.5 * (np.trace(r) - 1.0)))

    def is_identical(self, other: "Pose") -> bool:
        return bool(np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation))


def nearest_rotation(matrix: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def pose_error(estimate: Pose, truth: Pose) -> Tuple[float, float]:
    """Translation error (m) and rotation error (rad) of estimate vs truth."""
    delta = truth.inverse().compose(estimate)
    return float(np.linalg.norm(estimate.translation - truth.translation)), delta.rotation_angle()


@dataclass(frozen=True, eq=False)
class Trajectory:
    scan_indices: Tuple[int, ...]
    poses: Tuple[Pose, ...]
    _lookup: Dict[int, Pose] = field(init=False, repr=False)

    def __post_init__(self):
        indices = tuple(int(i) for i in self.scan_indices)
        poses = tuple(self.poses)
        if len(indices) != len(poses):
            raise TrajectoryError(f"{len(indices)} scan indices for {len(poses)} poses")
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise TrajectoryError("trajectory scan indices must be strictly increasing")
        object.__setattr__(self, "scan_indices", indices)
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "_lookup", dict(zip(indices, poses)))

    @classmethod
    def from_poses(cls, poses: Sequence[Pose]) -> "Trajectory":
        return cls(tuple(range(len(poses))), tuple(poses))

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[Tuple[int, Pose]]:
        return iter(zip(self.scan_indices, self.poses))

    def __contains__(self, scan_index: int) -> bool:
        return scan_index in self._lookup

    def pose_at(self, scan_index: int) -> Pose:
        try:
            return self._lookup[scan_index]
        except KeyError:
            raise TrajectoryError(f"trajectory has no pose for scan index {scan_index}") from None

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.empty((0, 3))
        return np.stack([p.translation for p in self.poses])

    def travelled(self) -> np.ndarray:
        """Cumulative path length at each pose."""
        positions = self.positions()
        if len(positions) == 0:
            return np.empty(0)
        steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass(frozen=True, eq=False)
class FeatureVector:
    eigen: np.ndarray
    esf: np.ndarray

    def __post_init__(self):
        eigen = np.array(self.eigen, dtype=np.float64).reshape(-1)
        esf = np.array(self.esf, dtype=np.float64).reshape(-1)
        if eigen.shape != (EIGEN_FEATURE_COUNT,):
            raise DescriptorError(f"eigen block must have {EIGEN_FEATURE_COUNT} values, got {eigen.size}")
        if esf.shape != (ESF_FEATURE_COUNT,):
            raise DescriptorError(f"shape block must have {ESF_FEATURE_COUNT} values, got {esf.size}")
        if not np.all(np.isfinite(eigen)):
            raise DescriptorError("eigen block contains non-finite values")
        if np.any(esf < 0) or not np.all(np.isfinite(esf)):
            raise DescriptorError("shape histograms must be finite and non-negative")
        object.__setattr__(self, "eigen", _frozen(eigen))
        object.__setattr__(self, "esf", _frozen(esf))

    def esf_blocks(self) -> np.ndarray:
        return self.esf.reshape(ESF_HISTOGRAM_COUNT, ESF_BIN_COUNT)

    @property
    def has_shapes(self) -> bool:
        return bool(np.any(self.esf > 0))

    def to_bytes(self) -> bytes:
        return FEATURE_VECTOR_TAG + np.concatenate([self.eigen, self.esf]).astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "FeatureVector":
        expected = len(FEATURE_VECTOR_TAG) + 8 * (EIGEN_FEATURE_COUNT + ESF_FEATURE_COUNT)
        if not payload.startswith(FEATURE_VECTOR_TAG):
            raise DescriptorError("feature vector payload is missing the SEGFV1 tag")
        if len(payload) != expected:
            raise DescriptorError(f"feature vector payload has {len(payload)} bytes, expected {expected}")
        values = np.frombuffer(payload, dtype="<f8", offset=len(FEATURE_VECTOR_TAG))
        return cls(values[:EIGEN_FEATURE_COUNT], values[EIGEN_FEATURE_COUNT:])


@dataclass(frozen=True, eq=False)
class Segment:
    id: int
    points: PointCloud
    centroid: Point3
    creation_index: int = 0
    feature: Optional[FeatureVector] = None

    @classmethod
    def from_points(cls, segment_id: int, points: np.ndarray, creation_index: int = 0,
                    frame_id: str = "world") -> "Segment":
        cloud = points if isinstance(points, PointCloud) else PointCloud(points, frame_id)
        return cls(int(segment_id), cloud, cloud.centroid(), int(creation_index))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def described(self) -> bool:
        return self.feature is not None

    def with_feature(self, feature: FeatureVector) -> "Segment":
        return replace(self, feature=feature)

    def transformed(self, pose: Pose) -> "Segment":
        points = self.points.with_points(pose.apply(self.points.points))
        return replace(self, points=points, centroid=_frozen(pose.apply(self.centroid)))


@dataclass(frozen=True, eq=False)
class CandidateMatch:
    source_id: int
    target_id: int
    score: float
    source_centroid: Point3
    target_centroid: Point3

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ParameterError(f"candidate score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True, eq=False)
class LoopClosure:
    transform: Pose
    inliers: Tuple[CandidateMatch, ...]
    consensus_size: int
    source_scan_index: int = -1

    def residuals(self) -> np.ndarray:
        if not self.inliers:
            return np.empty(0)
        sources = np.stack([m.source_centroid for m in self.inliers])
        targets = np.stack([m.target_centroid for m in self.inliers])
        return np.linalg.norm(self.transform.apply(sources) - targets, axis=1)

import logging
from typing import Tuple

import numpy as np

from .exceptions import ParameterError
from .models import PointCloud, Pose, as_point3

logger = logging.getLogger("segmatch.cloud")


def voxel_keys(points: np.ndarray, leaf: float) -> np.ndarray:
    """Integer voxel coordinates; boundary points fall in the higher-index voxel."""
    return np.floor(points / leaf).astype(np.int64)


def _bucket(keys: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    unique_keys, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return unique_keys, inverse.reshape(-1), counts


def _sum_by_bucket(values: np.ndarray, inverse: np.ndarray, bucket_count: int) -> np.ndarray:
    sums = np.empty((bucket_count, values.shape[1]))
    for axis in range(values.shape[1]):
        sums[:, axis] = np.bincount(inverse, weights=values[:, axis], minlength=bucket_count)
    return sums


def voxel_grid_filter(cloud: PointCloud, leaf: float, min_points_per_voxel: int = 2) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    Voxels holding fewer than min_points_per_voxel points are dropped. Output
    points are ordered by voxel key.
    """
    if leaf <= 0:
        raise ParameterError(f"voxel leaf must be positive, got {leaf}")
    if min_points_per_voxel < 1:
        raise ParameterError(f"min_points_per_voxel must be >= 1, got {min_points_per_voxel}")
    if len(cloud) == 0:
        return cloud

    points = cloud.points
    unique_keys, inverse, counts = _bucket(voxel_keys(points, leaf))
    centroids = _sum_by_bucket(points, inverse, len(unique_keys)) / counts[:, None]
    keep = counts >= min_points_per_voxel
    logger.debug(f"Voxel filter: {len(points)} points -> {int(keep.sum())} of {len(unique_keys)} voxels (leaf={leaf})")
    return cloud.with_points(centroids[keep])


def uniform_downsample(cloud: PointCloud, keep_ratio: float) -> PointCloud:
    """Keep every k-th point, k = round(1 / keep_ratio)."""
    if not 0 < keep_ratio <= 1:
        raise ParameterError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    stride = max(1, int(round(1.0 / keep_ratio)))
    if stride == 1:
        return cloud
    return cloud.with_points(cloud.points[::stride])


def horizontal_distances(points: np.ndarray, center) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)
    return np.hypot(points[:, 0] - center[0], points[:, 1] - center[1])


def extract_cylindrical_neighborhood(cloud: PointCloud, center, radius: float) -> PointCloud:
    """Points within horizontal distance radius of center; the cylinder is unbounded in z."""
    if radius <= 0:
        raise ParameterError(f"cylinder radius must be positive, got {radius}")
    center = as_point3(center)
    if len(cloud) == 0:
        return cloud
    mask = horizontal_distances(cloud.points, center) <= radius
    return cloud.with_points(cloud.points[mask])


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    return cloud.with_points(pose.apply(cloud.points))


class VoxelAccumulator:
    """Rolling voxel map of the scans seen so far.

    Every voxel keeps the running sum and count of the points that fell in it,
    so the active cloud equals voxel_grid_filter applied to all accumulated
    points. prune() discards voxels far from the robot to bound memory.
    """

    def __init__(self, leaf: float, min_points_per_voxel: int = 2, frame_id: str = "world"):
        if leaf <= 0:
            raise ParameterError(f"voxel leaf must be positive, got {leaf}")
        if min_points_per_voxel < 1:
            raise ParameterError(f"min_points_per_voxel must be >= 1, got {min_points_per_voxel}")
        self.leaf = leaf
        self.min_points_per_voxel = min_points_per_voxel
        self.frame_id = frame_id
        self._keys = np.empty((0, 3), dtype=np.int64)
        self._sums = np.empty((0, 3))
        self._counts = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._counts)

    @property
    def active_voxel_count(self) -> int:
        return int(np.count_nonzero(self._counts >= self.min_points_per_voxel))

    def insert(self, cloud: PointCloud) -> None:
        if len(cloud) == 0:
            return
        points = cloud.points
        keys = np.concatenate([self._keys, voxel_keys(points, self.leaf)])
        unique_keys, inverse, _ = _bucket(keys)
        previous = len(self._keys)
        sums = _sum_by_bucket(np.concatenate([self._sums, points]), inverse, len(unique_keys))
        # running counts: existing voxels carry their stored count, new points count once
        weights = np.concatenate([self._counts, np.ones(len(points), dtype=np.int64)])
        counts = np.bincount(inverse, weights=weights, minlength=len(unique_keys)).astype(np.int64)
        self._keys, self._sums, self._counts = unique_keys, sums, counts
        logger.debug(f"Accumulator: +{len(points)} points, {previous} -> {len(unique_keys)} voxels")

    def _centroids(self) -> np.ndarray:
        return self._sums / self._counts[:, None]

    def active_cloud(self, center=None, radius: float = None) -> PointCloud:
        """Centroids of voxels with enough points, optionally inside a vertical cylinder."""
        mask = self._counts >= self.min_points_per_voxel
        centroids = self._centroids()
        if center is not None:
            if radius is None or radius <= 0:
                raise ParameterError(f"cylinder radius must be positive, got {radius}")
            mask &= horizontal_distances(centroids, center) <= radius
        return PointCloud(centroids[mask], self.frame_id)

    def prune(self, center, radius: float) -> int:
        """Drop voxels whose centroid lies outside the cylinder; returns the number dropped."""
        if len(self) == 0:
            return 0
        keep = horizontal_distances(self._centroids(), center) <= radius
        dropped = int(np.count_nonzero(~keep))
        if dropped:
            self._keys, self._sums, self._counts = self._keys[keep], self._sums[keep], self._counts[keep]
        return dropped

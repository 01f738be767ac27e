import logging
from collections import deque
from typing import List, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .models import PointCloud, Segment
from .schemas import GroundRemoval, RegionGrowingParams, SegmentationParams

logger = logging.getLogger("segmatch.segmentation")

# 3x3 neighbourhood offsets used for the column-local minimum
_NEIGHBOUR_OFFSETS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]


def ground_mask(cloud: PointCloud, params: SegmentationParams) -> np.ndarray:
    """Boolean mask of the points classified as ground (z up)."""
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    if params.ground_removal is GroundRemoval.MIN_HEIGHT:
        return cloud.points[:, 2] <= params.ground_height
    return _voxel_statistics_ground_mask(cloud.points, params)


def _voxel_statistics_ground_mask(points: np.ndarray, params: SegmentationParams) -> np.ndarray:
    """Ground from vertical column statistics.

    A column (x, y cell) is a ground candidate when the points of its bottom
    layer (z within ground_height_band of the column minimum) have a vertical
    variance below ground_max_variance and a mean height within
    ground_height_band of the lowest bottom-layer mean in the 3x3 neighbourhood.
    Candidate columns are merged by 4-connectivity; components of at least
    ground_min_cells columns are ground and their bottom layers are removed.
    """
    cells = np.floor(points[:, :2] / params.ground_cell_size).astype(np.int64)
    cell_keys, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_cells = len(cell_keys)
    z = points[:, 2]

    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    column_min = np.minimum.reduceat(z[order], starts)

    band = z <= column_min[inverse] + params.ground_height_band
    band_count = np.bincount(inverse[band], minlength=n_cells)
    band_sum = np.bincount(inverse[band], weights=z[band], minlength=n_cells)
    band_sq = np.bincount(inverse[band], weights=z[band] ** 2, minlength=n_cells)
    band_mean = band_sum / band_count
    band_var = np.maximum(band_sq / band_count - band_mean ** 2, 0.0)

    # cell keys are sorted lexicographically, so this encoding is sorted too
    origin = cell_keys.min(axis=0) - 1
    width = int(cell_keys[:, 1].max() - origin[1]) + 2
    codes = (cell_keys[:, 0] - origin[0]) * width + (cell_keys[:, 1] - origin[1])

    def neighbour_index(dx: int, dy: int) -> np.ndarray:
        target = codes + dx * width + dy
        idx = np.searchsorted(codes, target)
        idx_clipped = np.minimum(idx, n_cells - 1)
        found = (idx < n_cells) & (codes[idx_clipped] == target)
        return np.where(found, idx_clipped, -1)

    neighbourhood_min = band_mean.copy()
    for dx, dy in _NEIGHBOUR_OFFSETS:
        idx = neighbour_index(dx, dy)
        valid = idx >= 0
        neighbourhood_min[valid] = np.minimum(neighbourhood_min[valid], band_mean[idx[valid]])

    candidate = (band_var < params.ground_max_variance) & (
        band_mean - neighbourhood_min <= params.ground_height_band
    )

    rows, cols = [], []
    for dx, dy in ((1, 0), (0, 1)):
        idx = neighbour_index(dx, dy)
        linked = candidate & (idx >= 0)
        linked[linked] &= candidate[idx[linked]]
        rows.append(np.flatnonzero(linked))
        cols.append(idx[linked])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_cells, n_cells))
    _, labels = connected_components(graph, directed=False)
    component_size = np.bincount(labels[candidate], minlength=labels.max() + 1)
    ground_cell = candidate & (component_size[labels] >= params.ground_min_cells)

    logger.debug(
        f"Voxel-statistics ground: {int(candidate.sum())}/{n_cells} candidate columns, "
        f"{int(ground_cell.sum())} kept as ground"
    )
    return band & ground_cell[inverse]


def remove_ground(cloud: PointCloud, params: SegmentationParams) -> PointCloud:
    if len(cloud) == 0:
        return cloud
    mask = ground_mask(cloud, params)
    return cloud.with_points(cloud.points[~mask])


def _segments_from_labels(
    points: np.ndarray,
    labels: np.ndarray,
    params: SegmentationParams,
    id_offset: int,
    creation_index: int,
    frame_id: str,
) -> List[Segment]:
    """Build size-admissible segments, ids in ascending order of first point index."""
    valid = labels >= 0
    if not np.any(valid):
        return []
    n_labels = int(labels[valid].max()) + 1
    indices = np.arange(len(points))
    counts = np.bincount(labels[valid], minlength=n_labels)
    first_index = np.full(n_labels, len(points), dtype=np.int64)
    np.minimum.at(first_index, labels[valid], indices[valid])

    member_order = indices[valid][np.argsort(labels[valid], kind="stable")]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    segments: List[Segment] = []
    next_id = id_offset
    for label in np.argsort(first_index, kind="stable"):
        size = counts[label]
        if size == 0 or not params.min_segment_points <= size <= params.max_segment_points:
            continue
        members = member_order[starts[label]:starts[label] + size]
        segments.append(Segment.from_points(next_id, points[members], creation_index, frame_id))
        next_id += 1
    return segments


def cluster_labels(points: np.ndarray, cluster_distance: float) -> np.ndarray:
    """Connected-component label of every point under dist(p, q) <= cluster_distance."""
    n = len(points)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(r=cluster_distance, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels.astype(np.int64)


def euclidean_segmenter(
    cloud: PointCloud,
    params: SegmentationParams,
    id_offset: int = 0,
    creation_index: int = 0,
) -> List[Segment]:
    """Euclidean clustering of a ground-free, voxel-filtered cloud."""
    if len(cloud) == 0:
        return []
    labels = cluster_labels(cloud.points, params.cluster_distance)
    segments = _segments_from_labels(cloud.points, labels, params, id_offset, creation_index, cloud.frame_id)
    logger.debug(
        f"Euclidean segmentation: {len(cloud)} points, {labels.max() + 1} components, "
        f"{len(segments)} within [{params.min_segment_points}, {params.max_segment_points}] points"
    )
    return segments


def estimate_normals(points: np.ndarray, neighbours: Sequence[Sequence[int]]):
    """Plane-fit normals and curvature lambda_3 / sum(lambda).

    Points with fewer than 3 neighbours (excluding themselves) get an undefined
    normal, reported through the returned mask.
    """
    n = len(points)
    normals = np.zeros((n, 3))
    curvature = np.full(n, np.inf)
    defined = np.zeros(n, dtype=bool)
    for i, nb in enumerate(neighbours):
        if len(nb) - 1 < 3:
            continue
        local = points[nb]
        centered = local - local.mean(axis=0)
        eigenvalues, eigenvectors = np.linalg.eigh(centered.T @ centered / len(local))
        total = eigenvalues.sum()
        normals[i] = eigenvectors[:, 0]
        curvature[i] = max(eigenvalues[0], 0.0) / total if total > 0 else 0.0
        defined[i] = True
    return normals, curvature, defined


def region_growing_segmenter(
    cloud: PointCloud,
    normal_radius: float,
    smoothness_threshold: float,
    curvature_threshold: float,
    params: SegmentationParams,
    id_offset: int = 0,
    creation_index: int = 0,
) -> List[Segment]:
    """Smoothness-constrained region growing.

    Seeds are taken in ascending curvature order (ties by point index). A
    region admits a neighbour whose normal deviates from the expanding point's
    normal by less than smoothness_threshold; admitted points with curvature
    below curvature_threshold are expanded in turn.
    """
    n = len(cloud)
    if n == 0:
        return []
    points = cloud.points
    neighbours = cKDTree(points).query_ball_point(points, r=normal_radius)
    neighbours = [np.asarray(nb, dtype=np.int64) for nb in neighbours]
    normals, curvature, defined = estimate_normals(points, neighbours)
    cos_threshold = np.cos(smoothness_threshold)

    labels = np.full(n, -1, dtype=np.int64)
    region = 0
    for seed in np.lexsort((np.arange(n), curvature)):
        if not defined[seed] or labels[seed] >= 0:
            continue
        labels[seed] = region
        queue = deque([seed])
        while queue:
            current = queue.popleft()
            nb = neighbours[current]
            nb = nb[(labels[nb] < 0) & defined[nb]]
            if len(nb) == 0:
                continue
            similar = nb[np.abs(normals[nb] @ normals[current]) >= cos_threshold]
            labels[similar] = region
            queue.extend(similar[curvature[similar] < curvature_threshold].tolist())
        region += 1

    segments = _segments_from_labels(points, labels, params, id_offset, creation_index, cloud.frame_id)
    unsegmented = int(np.count_nonzero(~defined))
    if unsegmented:
        logger.debug(f"Region growing: {unsegmented} points without a defined normal left unsegmented")
    logger.debug(f"Region growing: {region} regions, {len(segments)} within size bounds")
    return segments


def segment_cloud(
    cloud: PointCloud,
    params: SegmentationParams,
    growing: RegionGrowingParams = None,
    id_offset: int = 0,
    creation_index: int = 0,
) -> List[Segment]:
    """Dispatch to region growing when its parameters are given, else Euclidean clustering."""
    if growing is not None:
        return region_growing_segmenter(
            cloud,
            growing.normal_radius,
            growing.smoothness_threshold,
            growing.curvature_threshold,
            params,
            id_offset=id_offset,
            creation_index=creation_index,
        )
    return euclidean_segmenter(cloud, params, id_offset=id_offset, creation_index=creation_index)

import numpy as np
import pytest

from conftest import fibonacci_sphere_points
from segmatch.models import PointCloud
from segmatch.schemas import GroundRemoval, RegionGrowingParams, SegmentationParams
from segmatch.segmentation import (
    cluster_labels,
    euclidean_segmenter,
    ground_mask,
    region_growing_segmenter,
    remove_ground,
    segment_cloud,
)
from segmatch.synthetic import ball_points, box_surface, cylinder_surface


def union_find_components(points: np.ndarray, distance: float):
    """Brute-force connected components as a set of frozensets of point indices."""
    parent = list(range(len(points)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(points)):
        close = np.flatnonzero(np.linalg.norm(points[i + 1:] - points[i], axis=1) <= distance) + i + 1
        for j in close:
            parent[find(i)] = find(j)
    groups = {}
    for i in range(len(points)):
        groups.setdefault(find(i), set()).add(i)
    return {frozenset(g) for g in groups.values()}


def partition(labels: np.ndarray):
    return {frozenset(np.flatnonzero(labels == label).tolist()) for label in np.unique(labels)}


def member_sets(segments):
    return {frozenset(map(tuple, s.points.points)) for s in segments}


class TestEuclideanSegmenter:
    def test_two_blobs(self, rng):
        points = np.vstack([
            ball_points((0.0, 0.0, 1.0), 0.3, 150, rng),
            ball_points((5.0, 0.0, 1.0), 0.3, 150, rng),
        ])
        segments = euclidean_segmenter(PointCloud(points), SegmentationParams(cluster_distance=0.2))
        assert len(segments) == 2
        assert [len(s) for s in segments] == [150, 150]
        assert [s.id for s in segments] == [0, 1]

    def test_small_blob_is_discarded(self, rng):
        cloud = PointCloud(ball_points((0.0, 0.0, 1.0), 0.3, 50, rng))
        assert euclidean_segmenter(cloud, SegmentationParams()) == []

    def test_repeated_point(self):
        cloud = PointCloud(np.tile([[1.0, 2.0, 3.0]], (200, 1)))
        segments = euclidean_segmenter(cloud, SegmentationParams())
        assert len(segments) == 1
        np.testing.assert_array_equal(segments[0].centroid, [1.0, 2.0, 3.0])

    def test_oversized_component_is_discarded(self, rng):
        cloud = PointCloud(ball_points((0.0, 0.0, 1.0), 0.3, 300, rng))
        params = SegmentationParams(min_segment_points=10, max_segment_points=299)
        assert euclidean_segmenter(cloud, params) == []

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_union_find_oracle(self, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        n = int(rng.integers(200, 800))
        points = rng.uniform(0, 3, size=(n, 3))
        labels = cluster_labels(points, 0.2)
        oracle = union_find_components(points, 0.2)
        assert partition(labels) == oracle

        params = SegmentationParams(cluster_distance=0.2, min_segment_points=5, max_segment_points=n)
        segments = euclidean_segmenter(PointCloud(points), params)
        assert len(segments) == sum(1 for c in oracle if len(c) >= 5)
        kept = [c for c in oracle if len(c) >= 5]
        for segment in segments:
            rows = {tuple(p) for p in segment.points.points}
            assert any(rows == {tuple(points[i]) for i in component} for component in kept)

    def test_point_order_does_not_change_the_partition(self, rng):
        points = rng.uniform(0, 3, size=(600, 3))
        params = SegmentationParams(cluster_distance=0.2, min_segment_points=5, max_segment_points=600)
        shuffled = points[rng.permutation(len(points))]
        assert member_sets(euclidean_segmenter(PointCloud(shuffled), params)) == member_sets(
            euclidean_segmenter(PointCloud(points), params)
        )

    def test_translation_moves_segments_rigidly(self, rng):
        points = rng.uniform(0, 3, size=(600, 3))
        shift = np.array([12.5, -7.25, 3.0])
        params = SegmentationParams(cluster_distance=0.2, min_segment_points=5, max_segment_points=600)
        original = euclidean_segmenter(PointCloud(points), params)
        moved = euclidean_segmenter(PointCloud(points + shift), params)
        assert [len(s) for s in moved] == [len(s) for s in original]
        for a, b in zip(original, moved):
            np.testing.assert_allclose(b.centroid, a.centroid + shift, atol=1e-9)

    def test_id_offset_and_creation_index(self, blob_cloud):
        segments = segment_cloud(blob_cloud, SegmentationParams(), id_offset=40, creation_index=7)
        assert [s.id for s in segments] == [40, 41]
        assert all(s.creation_index == 7 for s in segments)


def grid_patch(u_axis, v_axis, spacing=0.05, size=1.0, origin=(0.0, 0.0, 0.0)):
    steps = np.arange(0.0, size + 1e-9, spacing)
    u, v = np.meshgrid(steps, steps, indexing="ij")
    return np.asarray(origin) + u.reshape(-1, 1) * np.asarray(u_axis) + v.reshape(-1, 1) * np.asarray(v_axis)


class TestRegionGrowing:
    params = SegmentationParams(min_segment_points=100, max_segment_points=15000)

    def test_perpendicular_planes(self):
        floor = grid_patch((1, 0, 0), (0, 1, 0))
        # the wall starts one step above the shared edge so no point is duplicated
        wall = grid_patch((0, 1, 0), (0, 0, 1), origin=(0.0, 0.0, 0.05))
        segments = region_growing_segmenter(PointCloud(np.vstack([floor, wall])), 0.15, 0.1, 0.05, self.params)
        assert len(segments) == 2

    def test_single_plane(self):
        plane = grid_patch((1, 0, 0), (0, 1, 0))
        segments = region_growing_segmenter(PointCloud(plane), 0.15, 0.1, 0.05, self.params)
        assert len(segments) == 1
        assert len(segments[0]) == len(plane)

    def test_sphere_chains_into_one_region(self):
        sphere = fibonacci_sphere_points(2000)
        segments = region_growing_segmenter(PointCloud(sphere), 0.2, 0.3, 0.05, self.params)
        assert len(segments) == 1
        assert len(segments[0]) == len(sphere)

    def test_dispatch(self):
        plane = PointCloud(grid_patch((1, 0, 0), (0, 1, 0)))
        segments = segment_cloud(plane, self.params, RegionGrowingParams(normal_radius=0.15))
        assert len(segments) == 1


class TestGroundRemoval:
    def test_empty_cloud(self):
        assert len(remove_ground(PointCloud.empty(), SegmentationParams())) == 0

    def test_min_height(self):
        cloud = PointCloud([[0.0, 0.0, -0.1], [0.0, 0.0, 0.0], [0.0, 0.0, 0.3]])
        mask = ground_mask(cloud, SegmentationParams(ground_height=0.0))
        assert mask.tolist() == [True, True, False]

    def test_voxel_statistics_on_tilted_ground(self, rng):
        steps = np.arange(0.0, 20.0, 0.1)
        gx, gy = np.meshgrid(steps, steps, indexing="ij")
        gx, gy = gx.reshape(-1), gy.reshape(-1)
        ground = np.column_stack([gx, gy, 0.05 * gx + rng.normal(0, 0.01, len(gx))])

        objects = []
        for x, y in ((4.2, 5.3), (10.7, 14.1), (15.4, 6.6)):
            objects.append(box_surface((1.0, 1.0, 2.0), 100.0, rng) + [x, y, 0.05 * x])
        objects.append(cylinder_surface(0.3, 3.0, 100.0, rng) + [8.3, 9.6, 0.05 * 8.3])
        objects = np.vstack(objects)

        cloud = PointCloud(np.vstack([ground, objects]))
        params = SegmentationParams(ground_removal=GroundRemoval.VOXEL_STATISTICS)
        mask = ground_mask(cloud, params)
        assert mask[:len(ground)].mean() >= 0.95
        assert mask[len(ground):].mean() <= 0.01

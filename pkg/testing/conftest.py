import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
for path in (ROOT / "libs" / "segmatch", ROOT / "services" / "segmatch-cli"):
    if str(path) not in sys.path:
        sys.path.insert(0, str(path))

from segmatch.descriptors import describe  # noqa: E402
from segmatch.models import ESF_FEATURE_COUNT, FeatureVector, PointCloud, Segment  # noqa: E402
from segmatch.schemas import PipelineConfig  # noqa: E402
from segmatch.synthetic import generate_sequence, generate_world, two_blob_cloud  # noqa: E402


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture
def blob_cloud() -> PointCloud:
    return two_blob_cloud(seed=0)


def make_segment(segment_id: int, eigen, centroid=(0.0, 0.0, 0.0), creation_index: int = 0, esf=None) -> Segment:
    """A described segment with a tiny point set around centroid."""
    offsets = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]])
    points = offsets - offsets.mean(axis=0) + np.asarray(centroid, dtype=np.float64)
    segment = Segment.from_points(segment_id, points, creation_index)
    esf = np.zeros(ESF_FEATURE_COUNT) if esf is None else esf
    return segment.with_feature(FeatureVector(eigen, esf))


def described(segment: Segment, sample_count: int = 2000) -> Segment:
    return describe(segment, sample_count=sample_count, rng_seed=0)


def synthetic_config(**overrides) -> PipelineConfig:
    """Settings under which the synthetic scenes segment cleanly from a single scan."""
    values = dict(
        classifier="l2",
        l2_threshold=1e-6,
        cylinder_radius=40.0,
        boundary_thickness=3.0,
        keep_ratio=1.0,
        scan_spacing=0.0,
        accumulate_scans=False,
        min_points_per_voxel=1,
        min_segment_points=50,
        ground_height=0.2,
        knn=20,
        exclusion_window=50.0,
        esf_sample_count=2000,
    )
    values.update(overrides)
    return PipelineConfig(**values)


@pytest.fixture(scope="session")
def synthetic_scan():
    """(scan in sensor frame, pose) at the start of the default synthetic path."""
    world = generate_world(seed=3, object_count=40)
    sequence = generate_sequence(world, seed=3, step=2.0, waypoints=[(0.0, 0.0), (2.0, 0.0)])
    return sequence.scans[0], sequence.poses[0]


def fibonacci_sphere_points(count: int, radius: float = 1.0) -> np.ndarray:
    """Near-uniform points on a sphere surface."""
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return radius * np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])

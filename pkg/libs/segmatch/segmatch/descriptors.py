"""Per-segment feature vector f = [eigenvalue block, shape-histogram block]."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .exceptions import DescriptorError
from .models import (
    ESF_BIN_COUNT,
    ESF_FEATURE_COUNT,
    FeatureVector,
    Segment,
)
from .schemas import DescriptorParams

logger = logging.getLogger("segmatch.descriptors")

GRID_SIZE = 64
MAX_RESAMPLE_ROUNDS = 10
# eigenvalues below this fraction of the largest one are treated as zero
EIGEN_FLOOR = 1e-12
# largest triangle inscribed in a sphere of unit diameter (equilateral on a great circle)
MAX_TRIANGLE_AREA = 3.0 * np.sqrt(3.0) / 16.0

CLASS_IN, CLASS_OUT, CLASS_MIXED = 0, 1, 2

# limit values for a rank-0 or rank-1 covariance
DEGENERATE_EIGEN_FEATURES = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])


def normalized_eigenvalues(points: np.ndarray) -> np.ndarray:
    """Covariance eigenvalues l1 >= l2 >= l3 >= 0 scaled to sum to one (zeros if degenerate)."""
    centered = points - points.mean(axis=0)
    covariance = centered.T @ centered / len(points)
    eigenvalues = np.clip(np.linalg.eigvalsh(covariance)[::-1], 0.0, None)
    total = eigenvalues.sum()
    if total <= 0 or eigenvalues[0] <= 0:
        return np.zeros(3)
    eigenvalues = eigenvalues / total
    eigenvalues[eigenvalues < EIGEN_FLOOR * eigenvalues[0]] = 0.0
    return eigenvalues


def eigenvalue_features(segment: Segment) -> np.ndarray:
    """Linearity, planarity, scattering, omnivariance, anisotropy, eigenentropy, change of curvature."""
    if len(segment) == 0:
        raise DescriptorError(f"segment {segment.id} has no points")
    l1, l2, l3 = normalized_eigenvalues(segment.points.points)
    if l1 == 0.0:
        return DEGENERATE_EIGEN_FEATURES.copy()
    positive = np.array([l1, l2, l3])
    positive = positive[positive > 0]
    eigenentropy = float(-np.sum(positive * np.log(positive)))
    return np.array([
        (l1 - l2) / l1,
        (l2 - l3) / l1,
        l3 / l1,
        np.cbrt(l1 * l2 * l3),
        (l1 - l3) / l1,
        eigenentropy,
        l3 / (l1 + l2 + l3),
    ])


@dataclass(frozen=True, eq=False)
class ShapeSamples:
    """Raw shape-function samples, every value scaled to [0, 1]."""
    d2: np.ndarray
    d2_ratio: np.ndarray
    d2_class: np.ndarray
    d3: np.ndarray
    a3: np.ndarray
    triplet_class: np.ndarray
    diameter: float
    degenerate_triplets: int


class _OccupancyGrid:
    """64^3 occupancy grid in the segment's principal-axis frame.

    The cube is centred on the centroid with side equal to the bounding-sphere
    diameter; axis signs are fixed by third moments so that a rigidly moved
    copy of the segment fills the same cells.
    """

    def __init__(self, points: np.ndarray, diameter: float):
        centered = points - points.mean(axis=0)
        _, eigenvectors = np.linalg.eigh(centered.T @ centered / len(points))
        local = centered @ eigenvectors[:, ::-1]
        skew = np.sum(local ** 3, axis=0)
        local = local * np.where(skew < 0, -1.0, 1.0)
        self.coords = (local / diameter + 0.5) * GRID_SIZE
        cells = self._cells(self.coords)
        self.occupied = np.zeros(GRID_SIZE ** 3, dtype=bool)
        self.occupied[cells] = True

    @staticmethod
    def _cells(coords: np.ndarray) -> np.ndarray:
        idx = np.clip(np.floor(coords).astype(np.int64), 0, GRID_SIZE - 1)
        return (idx[..., 0] * GRID_SIZE + idx[..., 1]) * GRID_SIZE + idx[..., 2]

    def line_ratio(self, a: np.ndarray, b: np.ndarray, line_samples: int, chunk: int = 4096) -> np.ndarray:
        """Fraction of interior samples of segment a-b that fall in occupied cells."""
        steps = np.linspace(0.0, 1.0, line_samples)[1:-1]
        ratios = np.empty(len(a))
        for start in range(0, len(a), chunk):
            ga = self.coords[a[start:start + chunk]]
            gb = self.coords[b[start:start + chunk]]
            positions = ga[:, None, :] + steps[None, :, None] * (gb - ga)[:, None, :]
            ratios[start:start + chunk] = self.occupied[self._cells(positions)].mean(axis=1)
        return ratios


def _classify(ratio: np.ndarray) -> np.ndarray:
    classes = np.full(len(ratio), CLASS_MIXED, dtype=np.int8)
    classes[ratio >= 1.0] = CLASS_IN
    classes[ratio <= 0.0] = CLASS_OUT
    return classes


def _distinct_pairs(rng: np.random.Generator, n_points: int, count: int):
    a = rng.integers(0, n_points, size=count)
    b = (a + rng.integers(1, n_points, size=count)) % n_points
    return a, b


def _distinct_triplets(rng: np.random.Generator, n_points: int, count: int):
    a = rng.integers(0, n_points, size=count)
    first = rng.integers(1, n_points, size=count)
    second = rng.integers(1, n_points - 1, size=count)
    second = second + (second >= first)
    return a, (a + first) % n_points, (a + second) % n_points


def _triangle_areas(points: np.ndarray, a, b, c) -> np.ndarray:
    return 0.5 * np.linalg.norm(np.cross(points[b] - points[a], points[c] - points[a]), axis=1)


def shape_function_samples(
    points: np.ndarray,
    sample_count: int,
    rng_seed: int,
    line_samples: int = 32,
) -> ShapeSamples:
    """Draw D2 pairs and D3/A3 triplets and trace their occupancy.

    Distances are divided by the bounding-sphere diameter, triangle areas by
    the largest area a triangle inscribed in that sphere can have, angles by pi.
    Zero-area triplets are redrawn up to MAX_RESAMPLE_ROUNDS times; any left
    over contribute 0 to D3.
    """
    points = np.asarray(points, dtype=np.float64)
    n_points = len(points)
    if n_points < 3:
        raise DescriptorError(f"shape functions need at least 3 points, got {n_points}")
    if sample_count < 1:
        raise DescriptorError(f"sample_count must be >= 1, got {sample_count}")

    rng = np.random.Generator(np.random.PCG64(rng_seed))
    centroid = points.mean(axis=0)
    diameter = 2.0 * float(np.max(np.linalg.norm(points - centroid, axis=1)))
    scale = diameter if diameter > 0 else 1.0
    grid = _OccupancyGrid(points, scale)

    a, b = _distinct_pairs(rng, n_points, sample_count)
    d2 = np.linalg.norm(points[a] - points[b], axis=1) / scale
    d2_ratio = grid.line_ratio(a, b, line_samples)

    ta, tb, tc = _distinct_triplets(rng, n_points, sample_count)
    area = _triangle_areas(points, ta, tb, tc)
    min_area = 1e-12 * scale ** 2
    for _ in range(MAX_RESAMPLE_ROUNDS):
        degenerate = np.flatnonzero(area <= min_area)
        if len(degenerate) == 0:
            break
        ra, rb, rc = _distinct_triplets(rng, n_points, len(degenerate))
        ta[degenerate], tb[degenerate], tc[degenerate] = ra, rb, rc
        area[degenerate] = _triangle_areas(points, ra, rb, rc)
    degenerate = area <= min_area

    d3 = np.sqrt(np.where(degenerate, 0.0, area) / (MAX_TRIANGLE_AREA * scale ** 2))
    u = points[tb] - points[ta]
    v = points[tc] - points[ta]
    norms = np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosine = np.where(norms > 0, np.einsum("ij,ij->i", u, v) / norms, 1.0)
    a3 = np.arccos(np.clip(cosine, -1.0, 1.0)) / np.pi
    triplet_ratio = grid.line_ratio(tb, tc, line_samples)

    return ShapeSamples(
        d2=np.clip(d2, 0.0, 1.0),
        d2_ratio=d2_ratio,
        d2_class=_classify(d2_ratio),
        d3=np.clip(d3, 0.0, 1.0),
        a3=a3,
        triplet_class=_classify(triplet_ratio),
        diameter=diameter,
        degenerate_triplets=int(np.count_nonzero(degenerate)),
    )


def unit_histogram(values: np.ndarray) -> np.ndarray:
    """64-bin histogram of values in [0, 1] with unit mass (all-zero when empty)."""
    bins = np.minimum((values * ESF_BIN_COUNT).astype(np.int64), ESF_BIN_COUNT - 1)
    histogram = np.bincount(bins, minlength=ESF_BIN_COUNT).astype(np.float64)
    total = histogram.sum()
    return histogram / total if total > 0 else histogram


def esf_features(segment: Segment, sample_count: int = 20000, rng_seed: int = 0, line_samples: int = 32) -> np.ndarray:
    """Ensemble of shape functions: 10 unit-mass 64-bin histograms.

    Block order: D2 in/out/mixed, D2 occupancy ratio, D3 in/out/mixed,
    A3 in/out/mixed. A class that received no sample is an all-zero block.
    """
    samples = shape_function_samples(segment.points.points, sample_count, rng_seed, line_samples)
    if samples.degenerate_triplets:
        logger.debug(f"Segment {segment.id}: {samples.degenerate_triplets} zero-area triplets counted in bin 0")
    blocks = [unit_histogram(samples.d2[samples.d2_class == cls]) for cls in (CLASS_IN, CLASS_OUT, CLASS_MIXED)]
    blocks.append(unit_histogram(samples.d2_ratio))
    for values in (samples.d3, samples.a3):
        blocks.extend(
            unit_histogram(values[samples.triplet_class == cls]) for cls in (CLASS_IN, CLASS_OUT, CLASS_MIXED)
        )
    return np.concatenate(blocks)


def describe(
    segment: Segment,
    sample_count: int = 20000,
    rng_seed: int = 0,
    with_shapes: bool = True,
    line_samples: int = 32,
) -> Segment:
    """Return a copy of segment with its feature vector populated."""
    if len(segment) < 3:
        raise DescriptorError(f"segment {segment.id} has {len(segment)} points, at least 3 are required")
    eigen = eigenvalue_features(segment)
    if with_shapes:
        esf = esf_features(segment, sample_count, rng_seed, line_samples)
    else:
        esf = np.zeros(ESF_FEATURE_COUNT)
    return segment.with_feature(FeatureVector(eigen, esf))


def describe_segments(segments: Sequence[Segment], params: DescriptorParams) -> List[Segment]:
    """Describe a batch of segments; the result keeps the input order."""

    def _describe(segment: Segment) -> Segment:
        return describe(segment, params.sample_count, params.rng_seed, params.with_shapes, params.line_samples)

    if params.workers <= 1 or len(segments) <= 1:
        return [_describe(segment) for segment in segments]
    with ThreadPoolExecutor(max_workers=params.workers) as executor:
        return list(executor.map(_describe, segments))

import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from .exceptions import DegenerateConfigurationError, ParameterError
from .models import CandidateMatch, LoopClosure, Pose
from .schemas import VerifyParams

logger = logging.getLogger("segmatch.geomverify")

SAMPLE_SIZE = 3
# second singular value relative to the first below which sources count as collinear
COLLINEAR_TOLERANCE = 1e-9
# draws allowed per iteration to find a sample with distinct source and target ids
_SAMPLE_ATTEMPTS = 32


def estimate_rigid_transform(sources: np.ndarray, targets: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping sources onto targets (Kabsch).

    Args:
        sources: (N, 3) source centroids, N >= 3, not all collinear.
        targets: (N, 3) corresponding target centroids.

    Returns:
        Pose T with T(sources) ~ targets and det(R) = +1.
    """
    sources = np.asarray(sources, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if sources.shape != targets.shape or sources.ndim != 2 or sources.shape[1] != 3:
        raise ParameterError(f"correspondence arrays must both be (N, 3), got {sources.shape} and {targets.shape}")
    if len(sources) < SAMPLE_SIZE:
        raise DegenerateConfigurationError(f"need at least {SAMPLE_SIZE} correspondences, got {len(sources)}")

    source_mean = sources.mean(axis=0)
    target_mean = targets.mean(axis=0)
    source_centered = sources - source_mean
    spread = np.linalg.svd(source_centered, compute_uv=False)
    if spread[0] == 0 or spread[1] <= COLLINEAR_TOLERANCE * spread[0]:
        raise DegenerateConfigurationError("source centroids are collinear or coincident")

    covariance = source_centered.T @ (targets - target_mean)
    u, _, vt = np.linalg.svd(covariance)
    # reflection correction
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    translation = target_mean - rotation @ source_mean
    return Pose(rotation, translation)


def _greedy_inliers(residuals: np.ndarray, source_ids: np.ndarray, target_ids: np.ndarray,
                    resolution: float) -> np.ndarray:
    """Candidates within resolution, best residual first, each source and target id used once."""
    within = np.flatnonzero(residuals <= resolution)
    order = within[np.lexsort((within, residuals[within]))]
    used_sources, used_targets = set(), set()
    chosen = []
    for i in order:
        s, t = int(source_ids[i]), int(target_ids[i])
        if s in used_sources or t in used_targets:
            continue
        used_sources.add(s)
        used_targets.add(t)
        chosen.append(i)
    return np.array(sorted(chosen), dtype=np.int64)


def _draw_sample(rng: np.random.Generator, source_ids: np.ndarray, target_ids: np.ndarray) -> Optional[np.ndarray]:
    n = len(source_ids)
    for _ in range(_SAMPLE_ATTEMPTS):
        sample = rng.choice(n, size=SAMPLE_SIZE, replace=False)
        if len(set(source_ids[sample].tolist())) == SAMPLE_SIZE and len(set(target_ids[sample].tolist())) == SAMPLE_SIZE:
            return sample
    return None


def _required_iterations(inlier_ratio: float, confidence: float) -> float:
    """Iterations after which an all-inlier sample has been drawn with the given confidence (inf if unbounded)."""
    if inlier_ratio <= 0:
        return math.inf
    success = inlier_ratio ** SAMPLE_SIZE
    if success >= 1:
        return 0
    miss = math.log1p(-success)
    if miss == 0:
        return math.inf
    return math.log1p(-confidence) / miss


def ransac_verify(candidates: Sequence[CandidateMatch], params: VerifyParams,
                  source_scan_index: int = -1) -> Optional[LoopClosure]:
    """Search the largest geometrically consistent, one-to-one subset of candidates.

    The best hypothesis (largest consensus, then lowest residual sum) is
    refitted on its inliers until the inlier set is stable; inliers are then
    trimmed worst-first until every residual under the refitted transform is
    within resolution, so the returned transform is the fit of the returned
    inliers.
    """
    n = len(candidates)
    if n < SAMPLE_SIZE:
        return None
    sources = np.stack([c.source_centroid for c in candidates])
    targets = np.stack([c.target_centroid for c in candidates])
    source_ids = np.array([c.source_id for c in candidates], dtype=np.int64)
    target_ids = np.array([c.target_id for c in candidates], dtype=np.int64)
    if min(len(np.unique(source_ids)), len(np.unique(target_ids))) < SAMPLE_SIZE:
        return None

    rng = np.random.Generator(np.random.PCG64(params.seed))
    best_inliers = np.empty(0, dtype=np.int64)
    best_cost = math.inf
    iteration = 0
    budget = params.max_iterations
    while iteration < budget:
        iteration += 1
        sample = _draw_sample(rng, source_ids, target_ids)
        if sample is None:
            continue
        try:
            hypothesis = estimate_rigid_transform(sources[sample], targets[sample])
        except DegenerateConfigurationError:
            continue
        residuals = np.linalg.norm(hypothesis.apply(sources) - targets, axis=1)
        inliers = _greedy_inliers(residuals, source_ids, target_ids, params.resolution)
        if len(inliers) == 0:
            continue
        cost = float(residuals[inliers].sum())
        if len(inliers) > len(best_inliers) or (len(inliers) == len(best_inliers) and cost < best_cost):
            best_inliers, best_cost = inliers, cost
            required = _required_iterations(len(inliers) / n, params.confidence)
            if math.isfinite(required):
                budget = min(params.max_iterations, max(iteration, math.ceil(required)))

    if len(best_inliers) < params.min_cluster_size:
        logger.debug(f"RANSAC: best consensus {len(best_inliers)} < {params.min_cluster_size} after {iteration} iterations")
        return None

    transform, inliers = _refine(sources, targets, source_ids, target_ids, best_inliers, params)
    if transform is None or len(inliers) < params.min_cluster_size:
        return None

    closure = LoopClosure(
        transform=transform,
        inliers=tuple(candidates[i] for i in inliers),
        consensus_size=len(inliers),
        source_scan_index=source_scan_index,
    )
    logger.debug(f"RANSAC: consensus {closure.consensus_size} of {n} candidates after {iteration} iterations")
    return closure


def _refine(sources, targets, source_ids, target_ids, inliers: np.ndarray,
            params: VerifyParams) -> Tuple[Optional[Pose], np.ndarray]:
    transform = None
    seen = set()
    for _ in range(params.max_iterations):
        key = tuple(inliers.tolist())
        if key in seen or len(inliers) < SAMPLE_SIZE:
            break
        seen.add(key)
        try:
            transform = estimate_rigid_transform(sources[inliers], targets[inliers])
        except DegenerateConfigurationError:
            return None, inliers
        residuals = np.linalg.norm(transform.apply(sources) - targets, axis=1)
        refreshed = _greedy_inliers(residuals, source_ids, target_ids, params.resolution)
        if len(refreshed) < len(inliers):
            break
        inliers = refreshed

    # trim until the fit of the kept inliers has every residual within resolution
    while len(inliers) >= SAMPLE_SIZE:
        try:
            transform = estimate_rigid_transform(sources[inliers], targets[inliers])
        except DegenerateConfigurationError:
            return None, inliers
        residuals = np.linalg.norm(transform.apply(sources[inliers]) - targets[inliers], axis=1)
        worst = int(np.argmax(residuals))
        if residuals[worst] <= params.resolution:
            return transform, inliers
        inliers = np.delete(inliers, worst)
    return None, inliers


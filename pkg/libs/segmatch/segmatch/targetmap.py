"""Target segment map built online (loop-closure mode) or loaded from disk (localization)."""
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .cloud import horizontal_distances
from .codec import BinaryReader, BinaryWriter
from .exceptions import DescriptorError, DuplicateSegmentIdError, MapFormatError, ParameterError
from .models import (
    EIGEN_FEATURE_COUNT,
    ESF_FEATURE_COUNT,
    FeatureVector,
    PointCloud,
    Segment,
    Trajectory,
    as_point3,
)
from .schemas import TargetMapParams

logger = logging.getLogger("segmatch.targetmap")

MAP_MAGIC = b"SEGMAP1"
MAP_VERSION = 1


@dataclass(frozen=True, eq=False)
class TargetMap:
    segments: Mapping[int, Segment]
    params: TargetMapParams = field(default_factory=TargetMapParams)
    next_id: int = 0

    def __post_init__(self):
        ordered = {sid: self.segments[sid] for sid in sorted(self.segments)}
        object.__setattr__(self, "segments", MappingProxyType(ordered))
        if ordered:
            object.__setattr__(self, "next_id", max(self.next_id, max(ordered) + 1))

    @classmethod
    def empty(cls, params: Optional[TargetMapParams] = None) -> "TargetMap":
        return cls({}, params or TargetMapParams())

    def __len__(self) -> int:
        return len(self.segments)

    def __contains__(self, segment_id: int) -> bool:
        return segment_id in self.segments

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments.values())

    def ids(self) -> List[int]:
        return list(self.segments)

    def centroids(self) -> np.ndarray:
        if not self.segments:
            return np.empty((0, 3))
        return np.stack([s.centroid for s in self.segments.values()])

    @cached_property
    def centroid_index(self) -> Optional[cKDTree]:
        return cKDTree(self.centroids()) if self.segments else None

    def segments_near(self, point, radius: float) -> List[int]:
        """Ids of segments whose centroid lies within radius of point, ascending."""
        if self.centroid_index is None:
            return []
        rows = self.centroid_index.query_ball_point(as_point3(point), r=radius)
        ids = self.ids()
        return sorted(ids[row] for row in rows)

    def _with_segments(self, segments: Mapping[int, Segment]) -> "TargetMap":
        return TargetMap(segments, self.params, self.next_id)

    def snapshot(self, eligible: Iterable[int]) -> "TargetMap":
        return self._with_segments({sid: self.segments[sid] for sid in eligible if sid in self.segments})

    def created_before(self, scan_index: int) -> "TargetMap":
        """Segments whose creation_index is strictly below scan_index."""
        return self._with_segments({sid: s for sid, s in self.segments.items() if s.creation_index < scan_index})


def filter_incomplete(segments: Sequence[Segment], center, radius: float, boundary: float) -> List[Segment]:
    """Drop segments reaching into the boundary band (R - b, R] around center."""
    if not 0 < boundary < radius:
        raise ParameterError(f"boundary thickness must satisfy 0 < b < R, got b={boundary}, R={radius}")
    center = as_point3(center)
    inner = radius - boundary
    kept = [s for s in segments if horizontal_distances(s.points.points, center).max() <= inner]
    if len(kept) < len(segments):
        logger.debug(f"Incomplete filter: dropped {len(segments) - len(kept)} of {len(segments)} segments")
    return kept


def insert_segments(target_map: TargetMap, segments: Sequence[Segment], scan_index: int) -> TargetMap:
    merged: Dict[int, Segment] = dict(target_map.segments)
    for segment in segments:
        if segment.id in merged:
            raise DuplicateSegmentIdError(f"segment id {segment.id} is already in the target map")
        merged[segment.id] = replace(segment, creation_index=int(scan_index))
    return target_map._with_segments(merged)


def _age_key(segment: Segment):
    return segment.creation_index, segment.id


def remove_duplicates(target_map: TargetMap, min_creation_index: Optional[int] = None) -> TargetMap:
    """Keep the newest view of every structure.

    Segments are visited from newest to oldest; every surviving segment removes
    the older segments whose centroid lies within duplicate_distance of its
    own. With min_creation_index, a segment created at or after it does not
    remove segments created before it: the older view stays matchable until
    its replacement itself falls before min_creation_index, and a later pass
    removes it then.
    """
    if len(target_map) < 2:
        return target_map
    segments = list(target_map)
    ids = [s.id for s in segments]
    tree = target_map.centroid_index

    def held_back(newer: Segment, older: Segment) -> bool:
        return (
            min_creation_index is not None
            and newer.creation_index >= min_creation_index > older.creation_index
        )

    removed = set()
    for segment in sorted(segments, key=_age_key, reverse=True):
        if segment.id in removed:
            continue
        for row in tree.query_ball_point(segment.centroid, r=target_map.params.duplicate_distance):
            other = segments[row]
            if other.id == segment.id or other.id in removed:
                continue
            if _age_key(other) < _age_key(segment) and not held_back(segment, other):
                removed.add(other.id)
    if not removed:
        return target_map
    logger.debug(f"Duplicate removal: {len(removed)} of {len(ids)} segments dropped")
    return target_map._with_segments({sid: s for sid, s in target_map.segments.items() if sid not in removed})


def update_poses(target_map: TargetMap, old_trajectory: Trajectory, new_trajectory: Trajectory) -> TargetMap:
    """Re-express every segment through new_pose(c) * old_pose(c)^-1, then deduplicate."""
    updated: Dict[int, Segment] = {}
    moved = 0
    for segment in target_map:
        old_pose = old_trajectory.pose_at(segment.creation_index)
        new_pose = new_trajectory.pose_at(segment.creation_index)
        if old_pose.is_identical(new_pose):
            updated[segment.id] = segment
            continue
        updated[segment.id] = segment.transformed(new_pose.compose(old_pose.inverse()))
        moved += 1
    logger.info(f"Pose update: {moved} of {len(target_map)} segments re-expressed")
    return remove_duplicates(target_map._with_segments(updated))


# --- Persistence ---

def map_to_bytes(target_map: TargetMap) -> bytes:
    writer = BinaryWriter().raw(MAP_MAGIC).pack("H", MAP_VERSION)
    writer.pack("ddqI", target_map.params.duplicate_distance, target_map.params.boundary_thickness,
                target_map.next_id, len(target_map))
    for segment in target_map:
        frame = segment.points.frame_id.encode("utf-8")
        writer.pack("qq", segment.id, segment.creation_index).array(segment.centroid)
        writer.pack("B", 1 if segment.feature is not None else 0)
        if segment.feature is not None:
            writer.array(segment.feature.eigen).array(segment.feature.esf)
        writer.pack("H", len(frame)).raw(frame)
        writer.pack("I", len(segment)).array(segment.points.points)
    return writer.getvalue()


def map_from_bytes(payload: bytes, source: str = "<bytes>") -> TargetMap:
    reader = BinaryReader(payload, MapFormatError, source)
    if reader.raw(len(MAP_MAGIC), "magic") != MAP_MAGIC:
        raise MapFormatError(f"{source}: not a SEGMAP1 map file")
    (version,) = reader.unpack("H", "version")
    if version != MAP_VERSION:
        raise MapFormatError(f"{source}: map format version {version} is not supported (expected {MAP_VERSION})")
    duplicate_distance, boundary_thickness, next_id, count = reader.unpack("ddqI", "header")
    try:
        params = TargetMapParams(duplicate_distance=duplicate_distance, boundary_thickness=boundary_thickness)
    except ValueError as e:
        raise MapFormatError(f"{source}: invalid map parameters: {e}") from e

    segments: Dict[int, Segment] = {}
    for _ in range(count):
        segment_id, creation_index = reader.unpack("qq", "segment header")
        centroid = reader.array(3, what="centroid")
        (has_feature,) = reader.unpack("B", "feature flag")
        feature = None
        if has_feature:
            eigen = reader.array(EIGEN_FEATURE_COUNT, what="eigen block")
            esf = reader.array(ESF_FEATURE_COUNT, what="shape block")
            try:
                feature = FeatureVector(eigen, esf)
            except DescriptorError as e:
                raise MapFormatError(f"{source}: segment {segment_id}: {e}") from e
        (frame_length,) = reader.unpack("H", "frame id length")
        frame_id = reader.raw(frame_length, "frame id").decode("utf-8", errors="replace")
        (n_points,) = reader.unpack("I", "point count")
        points = reader.array(3 * n_points, what="points").reshape(n_points, 3)
        if segment_id in segments:
            raise MapFormatError(f"{source}: segment id {segment_id} stored twice")
        segments[segment_id] = Segment(
            id=segment_id,
            points=PointCloud(points, frame_id),
            centroid=as_point3(centroid),
            creation_index=creation_index,
            feature=feature,
        )
    reader.expect_end()
    return TargetMap(segments, params, next_id)


def save_map(target_map: TargetMap, path: Union[str, Path]) -> None:
    Path(path).write_bytes(map_to_bytes(target_map))
    logger.info(f"Saved target map with {len(target_map)} segments to {path}")


def load_map(path: Union[str, Path]) -> TargetMap:
    target_map = map_from_bytes(Path(path).read_bytes(), source=str(path))
    logger.info(f"Loaded target map with {len(target_map)} segments from {path}")
    return target_map

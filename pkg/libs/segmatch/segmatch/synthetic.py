"""Labelled synthetic worlds: a sparse ground, boxes, poles and bushes along a
closed path that is partly driven twice."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ParameterError
from .models import PointCloud, Pose

logger = logging.getLogger("segmatch.synthetic")

GROUND_LABEL = -1

# 90 x 40 m rectangle driven once, then its first 40 m again
DEFAULT_WAYPOINTS = ((0.0, 0.0), (90.0, 0.0), (90.0, 40.0), (0.0, 40.0), (0.0, 0.0), (40.0, 0.0))


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# --- Fixtures ---

def ball_points(center, radius: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples inside a ball."""
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = radius * np.cbrt(rng.random(count))
    return np.asarray(center, dtype=np.float64) + directions * radii[:, None]


def two_blob_cloud(seed: int = 0, points_per_blob: int = 4000, separation: float = 5.0,
                   radius: float = 0.5, height: float = 2.0) -> PointCloud:
    """Two dense balls well above z = 0, separation meters apart along x."""
    rng = _rng(seed)
    first = ball_points((0.0, 0.0, height), radius, points_per_blob, rng)
    second = ball_points((separation, 0.0, height), radius, points_per_blob, rng)
    return PointCloud(np.vstack([first, second]))


# --- Objects ---

def _surface_grid(extent_u: float, extent_v: float, density: float, rng: np.random.Generator) -> np.ndarray:
    count = max(1, int(round(extent_u * extent_v * density)))
    return rng.random((count, 2)) * np.array([extent_u, extent_v])


def box_surface(size, density: float, rng: np.random.Generator) -> np.ndarray:
    """Four walls and the roof of a box standing on z = 0, centred at the origin."""
    w, l, h = size
    faces = []
    for axis, half, (extent_u, extent_v) in ((0, w / 2, (l, h)), (1, l / 2, (w, h))):
        for sign in (-1.0, 1.0):
            uv = _surface_grid(extent_u, extent_v, density, rng)
            face = np.empty((len(uv), 3))
            face[:, axis] = sign * half
            face[:, 1 - axis] = uv[:, 0] - extent_u / 2
            face[:, 2] = uv[:, 1]
            faces.append(face)
    roof = _surface_grid(w, l, density, rng)
    faces.append(np.column_stack([roof[:, 0] - w / 2, roof[:, 1] - l / 2, np.full(len(roof), h)]))
    return np.vstack(faces)


def cylinder_surface(radius: float, height: float, density: float, rng: np.random.Generator) -> np.ndarray:
    uv = _surface_grid(2 * np.pi * radius, height, density, rng)
    angle = uv[:, 0] / radius
    side = np.column_stack([radius * np.cos(angle), radius * np.sin(angle), uv[:, 1]])
    cap_count = max(1, int(round(np.pi * radius ** 2 * density)))
    cap_r = radius * np.sqrt(rng.random(cap_count))
    cap_a = 2 * np.pi * rng.random(cap_count)
    cap = np.column_stack([cap_r * np.cos(cap_a), cap_r * np.sin(cap_a), np.full(cap_count, height)])
    return np.vstack([side, cap])


def sphere_surface(radius: float, density: float, rng: np.random.Generator) -> np.ndarray:
    count = max(1, int(round(4 * np.pi * radius ** 2 * density)))
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * radius + np.array([0.0, 0.0, radius])


@dataclass(frozen=True, eq=False)
class WorldObject:
    label: int
    kind: str
    position: np.ndarray
    footprint: float
    points: np.ndarray


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    objects: Tuple[WorldObject, ...]
    ground: np.ndarray
    waypoints: Tuple[Tuple[float, float], ...]

    def points_and_labels(self) -> Tuple[np.ndarray, np.ndarray]:
        points = [self.ground] + [o.points for o in self.objects]
        labels = [np.full(len(self.ground), GROUND_LABEL)] + [np.full(len(o.points), o.label) for o in self.objects]
        return np.vstack(points), np.concatenate(labels).astype(np.int64)

    def object_centroids(self) -> np.ndarray:
        return np.stack([o.points[o.points[:, 2] > 0.3].mean(axis=0) for o in self.objects])


def _distance_to_polyline(point: np.ndarray, waypoints: np.ndarray) -> float:
    best = np.inf
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        ab = b - a
        t = np.clip(np.dot(point - a, ab) / np.dot(ab, ab), 0.0, 1.0)
        best = min(best, float(np.linalg.norm(point - (a + t * ab))))
    return best


def _make_object(label: int, kind: str, rng: np.random.Generator, density: float):
    if kind == "box":
        size = (rng.uniform(0.6, 3.0), rng.uniform(0.6, 3.0), rng.uniform(1.0, 4.0))
        points = box_surface(size, density, rng)
        yaw = rng.uniform(0, np.pi)
        points = Pose.from_yaw(yaw).apply(points)
        footprint = 0.5 * float(np.hypot(size[0], size[1]))
    elif kind == "pole":
        radius = rng.uniform(0.15, 0.6)
        points = cylinder_surface(radius, rng.uniform(2.0, 6.0), density, rng)
        footprint = radius
    else:
        radius = rng.uniform(0.5, 1.5)
        points = sphere_surface(radius, density, rng)
        footprint = radius
    return points, footprint


def generate_world(
    seed: int = 0,
    object_count: int = 40,
    waypoints: Sequence[Tuple[float, float]] = DEFAULT_WAYPOINTS,
    offset_range: Tuple[float, float] = (5.0, 15.0),
    min_gap: float = 2.0,
    density: float = 100.0,
    ground_spacing: float = 1.0,
) -> SyntheticWorld:
    """Place object_count objects between offset_range meters from the path."""
    rng = _rng(seed)
    path = np.asarray(waypoints, dtype=np.float64)
    margin = offset_range[1]
    low = path.min(axis=0) - margin
    high = path.max(axis=0) + margin
    kinds = ("box", "pole", "bush")

    objects: List[WorldObject] = []
    attempts = 0
    while len(objects) < object_count:
        attempts += 1
        if attempts > 10000 * max(1, object_count):
            raise ParameterError(f"could not place {object_count} objects, placed {len(objects)}")
        xy = rng.uniform(low, high)
        if not offset_range[0] <= _distance_to_polyline(xy, path) <= offset_range[1]:
            continue
        kind = kinds[len(objects) % len(kinds)]
        points, footprint = _make_object(len(objects), kind, rng, density)
        if any(np.linalg.norm(o.position[:2] - xy) < o.footprint + footprint + min_gap for o in objects):
            continue
        position = np.array([xy[0], xy[1], 0.0])
        objects.append(WorldObject(len(objects), kind, position, footprint, points + position))

    gx = np.arange(low[0], high[0], ground_spacing)
    gy = np.arange(low[1], high[1], ground_spacing)
    grid = np.stack(np.meshgrid(gx, gy, indexing="ij"), axis=-1).reshape(-1, 2)
    grid = grid + rng.uniform(-0.3, 0.3, size=grid.shape) * ground_spacing
    ground = np.column_stack([grid, rng.normal(0.0, 0.02, size=len(grid))])
    logger.info(f"Synthetic world: {len(objects)} objects, {len(ground)} ground points (seed={seed})")
    return SyntheticWorld(tuple(objects), ground, tuple(map(tuple, path)))


# --- Trajectory and scans ---

def path_poses(waypoints: Sequence[Tuple[float, float]], step: float, sensor_height: float) -> List[Pose]:
    """Poses every step meters of arc length, yaw along the direction of travel."""
    path = np.asarray(waypoints, dtype=np.float64)
    lengths = np.linalg.norm(np.diff(path, axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    poses = []
    for s in np.arange(0.0, cumulative[-1] + 1e-9, step):
        leg = min(int(np.searchsorted(cumulative, s, side="right")) - 1, len(lengths) - 1)
        t = (s - cumulative[leg]) / lengths[leg]
        a, b = path[leg], path[leg + 1]
        xy = a + t * (b - a)
        yaw = float(np.arctan2(b[1] - a[1], b[0] - a[0]))
        poses.append(Pose.from_yaw(yaw, (xy[0], xy[1], sensor_height)))
    return poses


@dataclass(frozen=True, eq=False)
class SyntheticSequence:
    world: SyntheticWorld
    scans: Tuple[PointCloud, ...]
    poses: Tuple[Pose, ...]
    labels: Tuple[np.ndarray, ...]
    step: float = field(default=2.0)

    def __len__(self) -> int:
        return len(self.scans)

    def __iter__(self):
        return iter(zip(range(len(self.scans)), self.scans, self.poses))


def generate_sequence(
    world: SyntheticWorld,
    seed: int = 0,
    step: float = 2.0,
    sensor_range: float = 45.0,
    sensor_height: float = 1.73,
    keep_fraction: float = 0.7,
    noise: float = 0.01,
    waypoints: Optional[Sequence[Tuple[float, float]]] = None,
) -> SyntheticSequence:
    """Scans in the sensor frame: every world point within sensor_range, thinned and jittered."""
    rng = _rng(seed + 1)
    points, labels = world.points_and_labels()
    poses = path_poses(waypoints or world.waypoints, step, sensor_height)
    scans, scan_labels = [], []
    for pose in poses:
        in_range = np.hypot(points[:, 0] - pose.translation[0], points[:, 1] - pose.translation[1]) <= sensor_range
        in_range &= rng.random(len(points)) < keep_fraction
        observed = points[in_range] + rng.normal(0.0, noise, size=(int(in_range.sum()), 3))
        scans.append(PointCloud(pose.inverse().apply(observed), "sensor"))
        scan_labels.append(labels[in_range])
    logger.info(f"Synthetic sequence: {len(scans)} scans every {step} m")
    return SyntheticSequence(world, tuple(scans), tuple(poses), tuple(scan_labels), step)


def revisit_sequence(seed: int = 0, object_count: int = 40, step: float = 2.0, **kwargs) -> SyntheticSequence:
    world = generate_world(seed=seed, object_count=object_count)
    return generate_sequence(world, seed=seed, step=step, **kwargs)

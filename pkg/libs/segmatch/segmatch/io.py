"""Point cloud files, pose files and sequence datasets.

Supported clouds:
    SEGPC1   b"SEGPC1\\n", u64 count, count x 3 little-endian float64
    ASCII    one "x y z" triple per line
    KITTI    .bin velodyne scans, float32 x 4 (intensity dropped)
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .codec import BinaryReader, BinaryWriter
from .exceptions import DatasetError, PointCloudFormatError
from .models import PointCloud, Pose, Trajectory, nearest_rotation

logger = logging.getLogger("segmatch.io")

CLOUD_MAGIC = b"SEGPC1\n"
CLOUD_SUFFIXES = (".segpc", ".bin", ".txt", ".xyz")
# rows within this deviation from orthonormal are kept bit-exactly
EXACT_ROTATION_TOLERANCE = 1e-12
POSE_ROTATION_TOLERANCE = 1e-6

PathLike = Union[str, Path]


# --- Point clouds ---

def _read_kitti_bin(path: Path, frame_id: str) -> PointCloud:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise PointCloudFormatError(f"{path}: KITTI scan size {raw.size} is not a multiple of 4 floats")
    points = raw.reshape(-1, 4)[:, :3].astype(np.float64)
    if not np.all(np.isfinite(points)):
        raise PointCloudFormatError(f"{path}: scan contains non-finite coordinates")
    return PointCloud(points, frame_id)


def _read_ascii(payload: bytes, source: str, frame_id: str) -> PointCloud:
    rows = []
    for line_number, line in enumerate(payload.decode("utf-8", errors="replace").splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3:
            raise PointCloudFormatError(f"{source}:{line_number}: expected 3 coordinates, got {len(fields)}")
        try:
            row = [float(v) for v in fields]
        except ValueError:
            raise PointCloudFormatError(f"{source}:{line_number}: non-numeric coordinate in {line.strip()!r}") from None
        if not np.all(np.isfinite(row)):
            raise PointCloudFormatError(f"{source}:{line_number}: non-finite coordinate")
        rows.append(row)
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3), frame_id)


def read_point_cloud(path: PathLike, frame_id: str = "sensor") -> PointCloud:
    path = Path(path)
    if path.suffix == ".bin":
        return _read_kitti_bin(path, frame_id)
    payload = path.read_bytes()
    if not payload.startswith(CLOUD_MAGIC):
        return _read_ascii(payload, str(path), frame_id)
    reader = BinaryReader(payload, PointCloudFormatError, str(path))
    reader.raw(len(CLOUD_MAGIC), "magic")
    (count,) = reader.unpack("Q", "point count")
    points = reader.array(3 * count, what="points").reshape(count, 3)
    reader.expect_end()
    if not np.all(np.isfinite(points)):
        raise PointCloudFormatError(f"{path}: cloud contains non-finite coordinates")
    return PointCloud(points, frame_id)


def write_point_cloud(cloud: PointCloud, path: PathLike, binary: bool = True) -> None:
    path = Path(path)
    if binary:
        payload = BinaryWriter().raw(CLOUD_MAGIC).pack("Q", len(cloud)).array(cloud.points).getvalue()
        path.write_bytes(payload)
    else:
        np.savetxt(path, cloud.points, fmt="%.17g")


# --- Poses ---

def parse_pose_row(fields: Sequence[str], source: str, line_number: int) -> Pose:
    if len(fields) != 12:
        raise DatasetError(f"expected 12 values, got {len(fields)}", source, line_number)
    try:
        values = np.array([float(v) for v in fields], dtype=np.float64)
    except ValueError:
        raise DatasetError("pose row contains a non-numeric value", source, line_number) from None
    if not np.all(np.isfinite(values)):
        raise DatasetError("pose row contains a non-finite value", source, line_number)
    matrix = values.reshape(3, 4)
    rotation = matrix[:, :3]
    deviation = np.max(np.abs(rotation @ rotation.T - np.eye(3)))
    if deviation > POSE_ROTATION_TOLERANCE or np.linalg.det(rotation) <= 0:
        raise DatasetError(f"rotation is not a proper orthonormal matrix (deviation {deviation:.3e})", source, line_number)
    if deviation > EXACT_ROTATION_TOLERANCE:
        rotation = nearest_rotation(rotation)
    return Pose(rotation, matrix[:, 3])


def read_poses(pose_file: PathLike) -> Trajectory:
    pose_file = Path(pose_file)
    poses = []
    for line_number, line in enumerate(pose_file.read_text().splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        poses.append(parse_pose_row(fields, str(pose_file), line_number))
    return Trajectory.from_poses(poses)


def format_pose_row(pose: Pose) -> str:
    matrix = pose.as_matrix()[:3, :]
    return " ".join(f"{v:.17g}" for v in matrix.reshape(-1))


def write_poses(poses: Sequence[Pose], pose_file: PathLike) -> None:
    Path(pose_file).write_text("".join(format_pose_row(p) + "\n" for p in poses))


# --- Sequences ---

@dataclass(frozen=True)
class SequenceDataset:
    scan_paths: Tuple[Path, ...]
    trajectory: Trajectory
    label_paths: Optional[Tuple[Path, ...]] = None

    def __len__(self) -> int:
        return len(self.scan_paths)

    def scan(self, position: int) -> PointCloud:
        return read_point_cloud(self.scan_paths[position])

    def labels(self, position: int) -> Optional[np.ndarray]:
        if self.label_paths is None:
            return None
        return np.loadtxt(self.label_paths[position], dtype=np.int64, ndmin=1)

    def __iter__(self) -> Iterator[Tuple[int, PointCloud, Pose]]:
        for position, (scan_index, pose) in enumerate(self.trajectory):
            yield scan_index, self.scan(position), pose


def _scan_files(scan_dir: Path) -> List[Path]:
    return sorted(p for p in scan_dir.iterdir() if p.is_file() and p.suffix in CLOUD_SUFFIXES)


def load_sequence(scan_dir: PathLike, pose_file: PathLike) -> SequenceDataset:
    """Pair the scans of scan_dir (sorted by name) with the rows of pose_file.

    Scans are read lazily. A sibling labels/ directory with one file per scan
    is picked up when present.
    """
    scan_dir = Path(scan_dir)
    if not scan_dir.is_dir():
        raise DatasetError("scan directory does not exist", str(scan_dir))
    trajectory = read_poses(pose_file)
    scans = _scan_files(scan_dir)
    if len(scans) != len(trajectory):
        raise DatasetError(f"{len(scans)} scans but {len(trajectory)} poses", str(pose_file))
    label_dir = scan_dir.parent / "labels"
    label_paths = None
    if label_dir.is_dir():
        labels = sorted(label_dir.glob("*.txt"))
        if len(labels) == len(scans):
            label_paths = tuple(labels)
        else:
            logger.warning(f"Ignoring {label_dir}: {len(labels)} label files for {len(scans)} scans")
    logger.info(f"Loaded sequence {scan_dir}: {len(scans)} scans")
    return SequenceDataset(tuple(scans), trajectory, label_paths)


def write_sequence(
    directory: PathLike,
    scans: Sequence[PointCloud],
    poses: Sequence[Pose],
    labels: Optional[Sequence[np.ndarray]] = None,
) -> SequenceDataset:
    """Write scans/NNNNNN.segpc, poses.txt and optionally labels/NNNNNN.txt under directory."""
    if len(scans) != len(poses):
        raise DatasetError(f"{len(scans)} scans but {len(poses)} poses", str(directory))
    directory = Path(directory)
    scan_dir = directory / "scans"
    scan_dir.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(scans):
        write_point_cloud(cloud, scan_dir / f"{i:06d}.segpc")
    if labels is not None:
        label_dir = directory / "labels"
        label_dir.mkdir(exist_ok=True)
        for i, point_labels in enumerate(labels):
            np.savetxt(label_dir / f"{i:06d}.txt", np.asarray(point_labels, dtype=np.int64), fmt="%d")
    write_poses(poses, directory / "poses.txt")
    return load_sequence(scan_dir, directory / "poses.txt")

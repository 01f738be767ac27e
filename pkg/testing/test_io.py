import numpy as np
import pytest

from segmatch.exceptions import DatasetError, PointCloudFormatError
from segmatch.io import (
    CLOUD_MAGIC,
    format_pose_row,
    load_sequence,
    parse_pose_row,
    read_point_cloud,
    read_poses,
    write_point_cloud,
    write_poses,
    write_sequence,
)
from segmatch.models import PointCloud, Pose, nearest_rotation

IDENTITY_ROW = "1 0 0 0 0 1 0 0 0 0 1 0".split()


class TestPointClouds:
    def test_binary_round_trip_is_exact(self, tmp_path, rng):
        cloud = PointCloud(rng.normal(size=(500, 3)) * 30.0)
        path = tmp_path / "scan.segpc"
        write_point_cloud(cloud, path)
        assert path.read_bytes().startswith(CLOUD_MAGIC)
        np.testing.assert_array_equal(read_point_cloud(path).points, cloud.points)

    def test_ascii_round_trip_is_exact(self, tmp_path, rng):
        cloud = PointCloud(rng.normal(size=(50, 3)))
        path = tmp_path / "scan.xyz"
        write_point_cloud(cloud, path, binary=False)
        np.testing.assert_array_equal(read_point_cloud(path).points, cloud.points)

    def test_empty_binary_cloud(self, tmp_path):
        path = tmp_path / "empty.segpc"
        write_point_cloud(PointCloud.empty(), path)
        assert len(read_point_cloud(path)) == 0

    def test_ascii_errors_name_the_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0 0 0\n\n1 2\n")
        with pytest.raises(PointCloudFormatError, match=":3:"):
            read_point_cloud(path)
        path.write_text("0 0 zero\n")
        with pytest.raises(PointCloudFormatError, match=":1:"):
            read_point_cloud(path)
        path.write_text("0 0 nan\n")
        with pytest.raises(PointCloudFormatError):
            read_point_cloud(path)

    def test_truncated_binary(self, tmp_path, rng):
        path = tmp_path / "scan.segpc"
        write_point_cloud(PointCloud(rng.normal(size=(10, 3))), path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(PointCloudFormatError):
            read_point_cloud(path)

    def test_kitti_scan_drops_intensity(self, tmp_path, rng):
        raw = rng.normal(size=(100, 4)).astype("<f4")
        path = tmp_path / "000000.bin"
        raw.tofile(path)
        cloud = read_point_cloud(path)
        np.testing.assert_array_equal(cloud.points, raw[:, :3].astype(np.float64))

    def test_kitti_scan_size(self, tmp_path):
        path = tmp_path / "000000.bin"
        np.zeros(7, dtype="<f4").tofile(path)
        with pytest.raises(PointCloudFormatError):
            read_point_cloud(path)


class TestPoses:
    def test_identity_row(self):
        pose = parse_pose_row(IDENTITY_ROW, "poses.txt", 1)
        np.testing.assert_array_equal(pose.rotation, np.eye(3))
        np.testing.assert_array_equal(pose.translation, np.zeros(3))

    def test_wrong_field_count_names_the_line(self):
        with pytest.raises(DatasetError) as excinfo:
            parse_pose_row(IDENTITY_ROW[:11], "poses.txt", 4)
        assert excinfo.value.line == 4
        assert "poses.txt:4:" in str(excinfo.value)

    def test_non_numeric(self):
        with pytest.raises(DatasetError):
            parse_pose_row(IDENTITY_ROW[:11] + ["x"], "poses.txt", 1)

    def test_scaled_rotation_is_rejected(self):
        row = "2 0 0 0 0 1 0 0 0 0 1 0".split()
        with pytest.raises(DatasetError):
            parse_pose_row(row, "poses.txt", 1)

    def test_reflection_is_rejected(self):
        row = "-1 0 0 0 0 1 0 0 0 0 1 0".split()
        with pytest.raises(DatasetError):
            parse_pose_row(row, "poses.txt", 1)

    def test_slightly_off_rotation_is_projected(self):
        row = "1 1e-8 0 0 0 1 0 0 0 0 1 0".split()
        pose = parse_pose_row(row, "poses.txt", 1)
        assert np.max(np.abs(pose.rotation @ pose.rotation.T - np.eye(3))) < 1e-12

    def test_file_round_trip(self, tmp_path, rng):
        poses = [Pose(nearest_rotation(rng.normal(size=(3, 3))), rng.normal(size=3) * 100) for _ in range(5)]
        path = tmp_path / "poses.txt"
        write_poses(poses, path)
        trajectory = read_poses(path)
        assert len(trajectory) == 5
        for (_, restored), original in zip(trajectory, poses):
            assert restored.is_identical(original)

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("# header\n\n" + " ".join(IDENTITY_ROW) + "\n")
        assert len(read_poses(path)) == 1

    def test_row_format(self):
        assert format_pose_row(Pose.from_translation((1.5, 0.0, -2.0))) == "1 0 0 1.5 0 1 0 0 0 0 1 -2"


class TestSequences:
    def test_round_trip(self, tmp_path, rng):
        scans = [PointCloud(rng.normal(size=(20 + i, 3))) for i in range(3)]
        poses = [Pose.from_yaw(0.1 * i, (i, 0.0, 0.0)) for i in range(3)]
        labels = [np.arange(len(s)) % 4 for s in scans]
        dataset = write_sequence(tmp_path / "seq", scans, poses, labels)
        assert len(dataset) == 3
        for (scan_index, cloud, pose), scan, expected_pose in zip(dataset, scans, poses):
            np.testing.assert_array_equal(cloud.points, scan.points)
            assert pose.is_identical(expected_pose)
        np.testing.assert_array_equal(dataset.labels(1), labels[1])
        assert [p.name for p in dataset.scan_paths] == ["000000.segpc", "000001.segpc", "000002.segpc"]

    def test_without_labels(self, tmp_path, rng):
        dataset = write_sequence(tmp_path / "seq", [PointCloud(rng.normal(size=(5, 3)))], [Pose.identity()])
        assert dataset.labels(0) is None

    def test_scan_pose_count_mismatch(self, tmp_path, rng):
        write_sequence(tmp_path / "seq", [PointCloud(rng.normal(size=(5, 3)))] * 2, [Pose.identity()] * 2)
        write_poses([Pose.identity()], tmp_path / "seq" / "poses.txt")
        with pytest.raises(DatasetError):
            load_sequence(tmp_path / "seq" / "scans", tmp_path / "seq" / "poses.txt")

    def test_missing_scan_directory(self, tmp_path):
        with pytest.raises(DatasetError):
            load_sequence(tmp_path / "nowhere", tmp_path / "poses.txt")

    def test_mismatched_labels_are_ignored(self, tmp_path, rng):
        scans = [PointCloud(rng.normal(size=(5, 3)))] * 2
        write_sequence(tmp_path / "seq", scans, [Pose.identity()] * 2, [np.zeros(5)] * 2)
        (tmp_path / "seq" / "labels" / "000001.txt").unlink()
        dataset = load_sequence(tmp_path / "seq" / "scans", tmp_path / "seq" / "poses.txt")
        assert dataset.label_paths is None

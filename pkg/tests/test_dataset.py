"""File formats and dataset directory validation."""

import os

import numpy as np
import pytest

from splatslam.dataset import (
    DatasetError,
    load_calib,
    load_dataset,
    load_image,
    load_scan_ply,
    load_times,
    load_trajectory_tum,
    save_calib,
    save_image,
    save_scan_ply,
    save_times,
    save_trajectory_tum,
)
from splatslam.geometry import CameraIntrinsics, SE3Pose, rotation_about_axis


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(20, 30, 3))
    path = str(tmp_path / "img.png")
    save_image(path, img)
    back = load_image(path)
    assert back.shape == img.shape
    # 8-bit quantization: half a level of error at most.
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_image_round_trip_ppm(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, size=(8, 8, 3))
    path = str(tmp_path / "img.ppm")
    save_image(path, img)
    back = load_image(path)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_save_image_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError):
        save_image(str(tmp_path / "x.png"), np.zeros((4, 4)))


def test_scan_ply_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(100, 3)).astype(np.float32).astype(np.float64)
    path = str(tmp_path / "scan.ply")
    save_scan_ply(path, pts)
    back = load_scan_ply(path)
    assert np.array_equal(back, pts)


def test_scan_ply_empty(tmp_path):
    path = str(tmp_path / "scan.ply")
    save_scan_ply(path, np.zeros((0, 3)))
    assert load_scan_ply(path).shape == (0, 3)


def test_scan_ply_rejects_garbage(tmp_path):
    path = str(tmp_path / "bad.ply")
    with open(path, "wb") as fh:
        fh.write(b"not a ply\n")
    with pytest.raises(DatasetError):
        load_scan_ply(path)


def test_scan_ply_rejects_truncation(tmp_path):
    path = str(tmp_path / "scan.ply")
    save_scan_ply(path, np.ones((10, 3)))
    data = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(data[:-8])
    with pytest.raises(DatasetError):
        load_scan_ply(path)


def test_times_round_trip(tmp_path):
    path = str(tmp_path / "times.txt")
    times = np.array([0.0, 0.1, 0.25])
    save_times(path, times)
    assert np.allclose(load_times(path), times, atol=1e-6)


def test_calib_round_trip(tmp_path):
    K = CameraIntrinsics(fx=101.5, fy=99.25, cx=63.5, cy=47.5,
                         width=128, height=96)
    extr = SE3Pose.from_matrix(
        rotation_about_axis(np.array([0.3, 1.0, -0.2]), 0.4),
        np.array([0.05, -0.02, 0.1]))
    path = str(tmp_path / "calib.txt")
    save_calib(path, K, extr)
    (fx, fy, cx, cy), back = load_calib(path)
    assert (fx, fy, cx, cy) == pytest.approx((101.5, 99.25, 63.5, 47.5))
    assert np.allclose(back.as_matrix(), extr.as_matrix(), atol=1e-8)


def test_calib_rejects_malformed(tmp_path):
    path = str(tmp_path / "calib.txt")
    with open(path, "w") as fh:
        fh.write("1 2 3 4\n1 2 3\n")
    with pytest.raises(DatasetError):
        load_calib(path)


def test_trajectory_tum_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    times = np.array([0.0, 0.1, 0.2])
    poses = []
    for _ in range(3):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        poses.append(SE3Pose(quaternion=q, translation=rng.normal(size=3)))
    path = str(tmp_path / "traj.txt")
    save_trajectory_tum(path, times, poses)
    back_times, back_poses = load_trajectory_tum(path)
    assert np.allclose(back_times, times, atol=1e-6)
    for a, b in zip(poses, back_poses):
        assert np.allclose(a.as_matrix(), b.as_matrix(), atol=1e-7)


def test_trajectory_tum_skips_comments(tmp_path):
    path = str(tmp_path / "traj.txt")
    with open(path, "w") as fh:
        fh.write("# header\n0.0 1 2 3 0 0 0 1\n\n")
    times, poses = load_trajectory_tum(path)
    assert len(times) == 1
    assert np.allclose(poses[0].translation, [1, 2, 3])


def _write_minimal_dataset(root, n_frames=2):
    os.makedirs(os.path.join(root, "frames"))
    os.makedirs(os.path.join(root, "scans"))
    rng = np.random.default_rng(5)
    for i in range(n_frames):
        save_image(os.path.join(root, "frames", f"{i:06d}.png"),
                   rng.uniform(0, 1, size=(12, 16, 3)))
        save_scan_ply(os.path.join(root, "scans", f"{i:06d}.ply"),
                      rng.normal(size=(20, 3)))
    save_times(os.path.join(root, "times.txt"),
               0.1 * np.arange(n_frames))
    K = CameraIntrinsics(fx=50.0, fy=50.0, cx=7.5, cy=5.5,
                         width=16, height=12)
    save_calib(os.path.join(root, "calib.txt"), K, SE3Pose.identity())


def test_load_dataset(tmp_path):
    root = str(tmp_path / "ds")
    _write_minimal_dataset(root)
    ds = load_dataset(root)
    assert len(ds) == 2
    assert ds.intrinsics.width == 16
    assert ds.intrinsics.height == 12
    assert ds.groundtruth is None
    assert ds.load_image(0).shape == (12, 16, 3)
    assert ds.load_scan(1).points.shape == (20, 3)


def test_load_dataset_missing_dir(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(str(tmp_path / "nope"))


def test_load_dataset_missing_pieces(tmp_path):
    root = str(tmp_path / "ds")
    _write_minimal_dataset(root)
    os.remove(os.path.join(root, "scans", "000001.ply"))
    with pytest.raises(DatasetError):
        load_dataset(root)


def test_load_dataset_missing_frame(tmp_path):
    root = str(tmp_path / "ds")
    _write_minimal_dataset(root)
    os.remove(os.path.join(root, "frames", "000000.png"))
    with pytest.raises(DatasetError):
        load_dataset(root)


def test_load_dataset_bad_timestamps(tmp_path):
    root = str(tmp_path / "ds")
    _write_minimal_dataset(root)
    save_times(os.path.join(root, "times.txt"), np.array([0.2, 0.1]))
    with pytest.raises(DatasetError):
        load_dataset(root)


def test_load_dataset_empty_dir(tmp_path):
    root = str(tmp_path / "empty")
    os.makedirs(root)
    with pytest.raises(DatasetError):
        load_dataset(root)

"""Synthetic scene, sensor, and dataset-export behavior."""

import os

import numpy as np
import pytest

from splatslam.dataset import load_dataset
from splatslam.geometry import (
    CameraIntrinsics,
    SE3Pose,
    compose,
    project_points,
    rotation_about_axis,
    se3_exp,
)
from splatslam.simulator import (
    DEFAULT_BOX,
    SyntheticScene,
    TrajectorySpec,
    arc_trajectory,
    export_dataset,
    generate_scene,
    lidar_frustum_intrinsics,
    synth_image,
    synth_scan,
)


def test_generate_scene_deterministic():
    a = generate_scene(11, 5000)
    b = generate_scene(11, 5000)
    assert np.array_equal(a.gmap.positions, b.gmap.positions)
    assert np.array_equal(a.gmap.colors, b.gmap.colors)
    assert np.array_equal(a.gmap.opacities, b.gmap.opacities)
    assert np.array_equal(a.gmap.radii, b.gmap.radii)


def test_generate_scene_exact_count_inside_box():
    scene = generate_scene(3, 10_000)
    assert len(scene.gmap) == 10_000
    pos = scene.gmap.positions
    assert np.all(pos >= DEFAULT_BOX[0])
    assert np.all(pos <= DEFAULT_BOX[1])


def test_generate_scene_custom_box():
    box = np.array([[-2.0, -1.0, 0.0], [2.0, 1.0, 6.0]])
    scene = generate_scene(5, 3000, box)
    assert len(scene.gmap) == 3000
    assert np.all(scene.gmap.positions >= box[0])
    assert np.all(scene.gmap.positions <= box[1])


def test_generate_scene_rejects_bad_args():
    with pytest.raises(ValueError):
        generate_scene(0, 0)
    with pytest.raises(ValueError):
        generate_scene(0, 10, np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 1.0]]))


def test_scene_must_be_non_empty():
    scene = generate_scene(1, 10)
    with pytest.raises(ValueError):
        SyntheticScene(gmap=scene.gmap.from_arrays(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0)),
            box=scene.box, seed=0)


def test_nearby_views_differ():
    scene = generate_scene(7, 20_000)
    K = CameraIntrinsics(fx=100.0, fy=100.0, cx=47.5, cy=35.5,
                         width=96, height=72)
    pose_a = SE3Pose.identity()
    pose_b = compose(se3_exp(np.array([0.0, 0.02, 0.0, 0.05, 0.0, 0.0])),
                     pose_a)
    img_a = synth_image(scene, pose_a, K)
    img_b = synth_image(scene, pose_b, K)
    assert np.abs(img_a - img_b).mean() > 0.01


def test_synth_image_deterministic():
    scene = generate_scene(7, 5000)
    K = CameraIntrinsics(fx=80.0, fy=80.0, cx=31.5, cy=23.5,
                         width=64, height=48)
    a = synth_image(scene, SE3Pose.identity(), K)
    b = synth_image(scene, SE3Pose.identity(), K)
    assert np.array_equal(a, b)


def test_synth_image_black_when_facing_nothing():
    # All splats on a small far wall; camera turned 180 degrees away.
    box = np.array([[-1.0, -1.0, 9.0], [1.0, 1.0, 10.0]])
    scene = generate_scene(2, 500, box)
    K = CameraIntrinsics(fx=80.0, fy=80.0, cx=31.5, cy=23.5,
                         width=64, height=48)
    away = SE3Pose.from_matrix(
        rotation_about_axis(np.array([0.0, -1.0, 0.0]), np.pi), np.zeros(3))
    img = synth_image(scene, away, K)
    assert np.all(img == 0.0)


def test_synth_scan_empty_space_gives_empty_cloud():
    scene = generate_scene(7, 20_000)
    sky = SE3Pose.from_matrix(
        rotation_about_axis(np.array([1.0, 0.0, 0.0]), np.pi / 2),
        np.array([0.0, -5.0, 5.0]))
    cloud = synth_scan(scene, sky, 1000, seed=1, range_noise_sigma=0.0)
    assert len(cloud.points) == 0


def test_synth_scan_wall_distance():
    scene = generate_scene(7, 40_000)
    # 5 m from the far wall (z = 13); central rays are unobstructed.
    pose = SE3Pose(quaternion=np.array([0.0, 0.0, 0.0, 1.0]),
                   translation=np.array([0.0, 0.0, 8.0]))
    cloud = synth_scan(scene, pose, 2000, seed=3, range_noise_sigma=0.0)
    u = cloud.points / np.linalg.norm(cloud.points, axis=1, keepdims=True)
    cone = u[:, 2] > np.cos(np.radians(12.0))
    assert cone.sum() > 50
    # Points on the wall plane sit at local depth 5 regardless of ray angle.
    assert np.abs(cloud.points[cone, 2] - 5.0).max() < 0.05


def test_synth_scan_rotating_pattern_coverage():
    scene = generate_scene(7, 20_000)
    pose = SE3Pose.identity()
    a = synth_scan(scene, pose, 1500, seed=11, range_noise_sigma=0.0)
    b = synth_scan(scene, pose, 1500, seed=12, range_noise_sigma=0.0)
    assert a.points.shape != b.points.shape or not np.allclose(a.points, b.points)

    K = lidar_frustum_intrinsics(6000)

    def covered(points):
        pix, _, valid = project_points(K, SE3Pose.identity(), points)
        p = np.rint(pix[valid]).astype(int)
        ok = ((p[:, 0] >= 0) & (p[:, 0] < K.width)
              & (p[:, 1] >= 0) & (p[:, 1] < K.height))
        return set(map(tuple, p[ok]))

    ca, cb = covered(a.points), covered(b.points)
    assert len(ca | cb) > max(len(ca), len(cb))


def test_synth_scan_deterministic_and_noise():
    scene = generate_scene(7, 10_000)
    pose = SE3Pose.identity()
    a = synth_scan(scene, pose, 1000, seed=4, range_noise_sigma=0.0)
    b = synth_scan(scene, pose, 1000, seed=4, range_noise_sigma=0.0)
    assert np.array_equal(a.points, b.points)
    noisy = synth_scan(scene, pose, 1000, seed=4, range_noise_sigma=0.05)
    assert len(noisy.points) == len(a.points)
    assert not np.allclose(noisy.points, a.points)
    # Noise perturbs ranges, not directions.
    ua = a.points / np.linalg.norm(a.points, axis=1, keepdims=True)
    un = noisy.points / np.linalg.norm(noisy.points, axis=1, keepdims=True)
    assert np.abs(ua - un).max() < 1e-9


def test_scan_points_land_in_aligned_camera():
    scene = generate_scene(7, 40_000)
    cloud = synth_scan(scene, SE3Pose.identity(), 3000, seed=5,
                       range_noise_sigma=0.0)
    K = lidar_frustum_intrinsics(3000)
    pix, _, valid = project_points(K, SE3Pose.identity(), cloud.points)
    inside = (valid & (pix[:, 0] >= 0) & (pix[:, 0] <= K.width - 1)
              & (pix[:, 1] >= 0) & (pix[:, 1] <= K.height - 1))
    assert inside.sum() >= 0.9 * len(cloud.points)


def test_arc_trajectory_geometry():
    traj = arc_trajectory(50, step=0.2, yaw_step_deg=1.2)
    assert len(traj) == 50
    pos = np.array([p.translation for p in traj.lidar_poses])
    length = np.linalg.norm(np.diff(pos, axis=0), axis=1).sum()
    assert abs(length - 0.2 * 49) < 1e-9
    assert np.all(np.diff(traj.timestamps) > 0)
    # Stays within the default room with margin.
    assert np.all(pos >= DEFAULT_BOX[0] + 0.5)
    assert np.all(pos <= DEFAULT_BOX[1] - 0.5)


def test_trajectory_spec_validation():
    poses = (SE3Pose.identity(), SE3Pose.identity())
    with pytest.raises(ValueError):
        TrajectorySpec(timestamps=np.array([0.0, 0.0]), lidar_poses=poses,
                       lidar_to_camera=SE3Pose.identity())
    with pytest.raises(ValueError):
        TrajectorySpec(timestamps=np.array([0.0]), lidar_poses=poses,
                       lidar_to_camera=SE3Pose.identity())


def test_export_dataset_round_trip(tmp_path):
    scene = generate_scene(9, 4000)
    traj = arc_trajectory(3, step=0.3, yaw_step_deg=2.0)
    K = CameraIntrinsics(fx=60.0, fy=60.0, cx=31.5, cy=23.5,
                         width=64, height=48)
    out = str(tmp_path / "sim")
    export_dataset(scene, traj, K, out, rays_per_scan=800, seed=2)
    ds = load_dataset(out)
    assert len(ds) == 3
    assert ds.intrinsics.width == 64 and ds.intrinsics.height == 48
    assert abs(ds.intrinsics.fx - 60.0) < 1e-6
    img = ds.load_image(1)
    assert img.shape == (48, 64, 3)
    scan = ds.load_scan(1)
    assert scan.points.shape[1] == 3 and len(scan.points) > 0
    assert ds.groundtruth is not None
    gt_times, gt_poses = ds.groundtruth
    assert len(gt_poses) == 3
    # Ground-truth camera poses match the trajectory spec.
    want = traj.camera_pose(2)
    assert np.allclose(gt_poses[2].translation, want.translation, atol=1e-8)


def test_export_dataset_deterministic(tmp_path):
    scene = generate_scene(9, 2000)
    traj = arc_trajectory(2, step=0.3)
    K = CameraIntrinsics(fx=60.0, fy=60.0, cx=31.5, cy=23.5,
                         width=64, height=48)
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    export_dataset(scene, traj, K, out_a, rays_per_scan=500, seed=3)
    export_dataset(scene, traj, K, out_b, rays_per_scan=500, seed=3)
    for rel in ("times.txt", "calib.txt", "groundtruth.txt",
                os.path.join("frames", "000001.png"),
                os.path.join("scans", "000001.ply")):
        with open(os.path.join(out_a, rel), "rb") as fh:
            data_a = fh.read()
        with open(os.path.join(out_b, rel), "rb") as fh:
            data_b = fh.read()
        assert data_a == data_b, rel

"""Trajectory and image metric checks against closed forms and oracles."""

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio

from splatslam.geometry import SE3Pose, so3_exp
from splatslam.metrics import align_rigid, associate_timestamps, ate_rmse, psnr

from helpers import random_pose


def _pose_at(t):
    return SE3Pose.from_matrix(np.eye(3), np.asarray(t, dtype=np.float64))


def test_psnr_identical_is_infinite():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(16, 16, 3))
    value = psnr(img, img.copy())
    assert np.isinf(value) and value > 0


def test_psnr_uniform_offset_closed_form():
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.1)
    assert abs(psnr(a, b) - 20.0) < 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_psnr_matches_reference_implementation():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.uniform(0, 1, size=(12, 9, 3))
        b = rng.uniform(0, 1, size=(12, 9, 3))
        ref = peak_signal_noise_ratio(a, b, data_range=1.0)
        assert abs(psnr(a, b) - ref) < 1e-9


def test_associate_nearest_within_window():
    ta = np.array([0.0, 0.5, 1.0])
    tb = np.array([0.02, 0.48, 1.2])
    ia, ib = associate_timestamps(ta, tb)
    assert ia.tolist() == [0, 1]
    assert ib.tolist() == [0, 1]


def test_associate_random_jitter_recovers_identity():
    rng = np.random.default_rng(2)
    for _ in range(10):
        n = rng.integers(5, 40)
        ta = np.arange(n) * 0.1
        tb = ta + rng.uniform(-0.04, 0.04, size=n)
        ia, ib = associate_timestamps(ta, tb)
        assert ia.tolist() == list(range(n))
        assert ib.tolist() == list(range(n))


def test_associate_unsorted_reference():
    ta = np.array([0.0, 0.1])
    tb = np.array([0.1, 0.0])
    ia, ib = associate_timestamps(ta, tb)
    assert ia.tolist() == [0, 1]
    assert ib.tolist() == [1, 0]


def test_align_rigid_recovers_known_transform():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pts = rng.normal(size=(30, 3))
        w = rng.normal(size=3)
        w = w / np.linalg.norm(w) * rng.uniform(0, np.pi)
        R_true = so3_exp(w)
        t_true = rng.normal(size=3) * 2.0
        moved = pts @ R_true.T + t_true
        R, t = align_rigid(pts, moved)
        assert np.allclose(R, R_true, atol=1e-9)
        assert np.allclose(t, t_true, atol=1e-9)
        assert abs(np.linalg.det(R) - 1.0) < 1e-9


def test_align_rigid_planar_no_reflection():
    # Degenerate (planar) clouds must still produce a proper rotation.
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(20, 3))
    pts[:, 2] = 0.0
    R_true = so3_exp(np.array([0.0, 0.0, 0.4]))
    moved = pts @ R_true.T
    R, _ = align_rigid(pts, moved)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9
    assert np.allclose(R @ pts.T, moved.T, atol=1e-9)


def test_ate_identical_trajectories_zero():
    times = np.arange(5, dtype=np.float64)
    poses = [_pose_at((i * 0.3, 0.0, 0.1 * i)) for i in range(5)]
    assert ate_rmse(times, poses, times, poses) < 1e-12


def test_ate_constant_offset_absorbed_by_alignment():
    times = np.arange(6, dtype=np.float64)
    gt = [_pose_at((0.4 * i, 0.0, 0.2 * i)) for i in range(6)]
    est = [_pose_at((0.4 * i + 0.1, 0.0, 0.2 * i)) for i in range(6)]
    assert ate_rmse(times, est, times, gt) < 1e-9


def test_ate_hand_built_three_pose_case():
    """Residuals (e, -2e, e) in y around a straight line give RMSE e*sqrt(2).

    The y residuals sum to zero so the optimal alignment keeps the
    centroids fixed, and every rigid ambiguity about the line preserves
    the per-point residual norms.
    """
    e = 0.1
    times = np.array([0.0, 1.0, 2.0])
    gt = [_pose_at((0, 0, 0)), _pose_at((1, 0, 0)), _pose_at((2, 0, 0))]
    est = [_pose_at((0, e, 0)), _pose_at((1, -2 * e, 0)), _pose_at((2, e, 0))]
    expected = e * np.sqrt(2.0)
    assert abs(ate_rmse(times, est, times, gt) - expected) < 1e-9


def test_ate_rigidly_moved_trajectory_zero():
    rng = np.random.default_rng(5)
    times = np.arange(10, dtype=np.float64)
    gt = [random_pose(rng) for _ in range(10)]
    move = random_pose(rng)
    R = move.rotation_matrix
    est = [
        SE3Pose.from_matrix(R @ p.rotation_matrix,
                            R @ p.translation + move.translation)
        for p in gt
    ]
    assert ate_rmse(times, est, times, gt) < 1e-9


def test_ate_too_few_pairs():
    times = np.array([0.0])
    poses = [_pose_at((0, 0, 0))]
    with pytest.raises(ValueError):
        ate_rmse(times, poses, times, poses)
    # Two poses exist but timestamps are too far apart to associate.
    with pytest.raises(ValueError):
        ate_rmse(np.array([0.0, 1.0]),
                 [_pose_at((0, 0, 0)), _pose_at((1, 0, 0))],
                 np.array([10.0, 11.0]),
                 [_pose_at((0, 0, 0)), _pose_at((1, 0, 0))])

import numpy as np
import pytest

from splatslam.gaussian_map import GaussianMap
from splatslam.geometry import (
    CameraIntrinsics,
    PointCloud,
    SE3Pose,
    back_project,
    compose,
    invert,
    rotation_about_axis,
    rotation_angle,
    so3_exp,
    transform_points,
)
from splatslam.optimization import TrackingConfig
from splatslam.relocalization import (
    OrbFeatureBackend,
    RelocConfig,
    attempt_relocalize,
    look_around,
    match_features,
    solve_pnp,
)
from splatslam.renderer import render
from splatslam.tracking import Frame


def test_look_around_ring():
    rng = np.random.default_rng(0)
    anchor = SE3Pose.from_matrix(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    n = 8
    poses = look_around(anchor, n)
    assert len(poses) == n
    assert np.allclose(poses[0].as_matrix(), anchor.as_matrix())
    up = np.array([0.0, -1.0, 0.0])
    for k, p in enumerate(poses):
        assert np.allclose(p.translation, anchor.translation)
        expected_R = rotation_about_axis(up, 2 * np.pi * k / n) @ anchor.rotation_matrix
        assert np.allclose(p.rotation_matrix, expected_R, atol=1e-12)


def _pnp_problem(rng, n_points, noise=0.0, width=128, height=128):
    K = CameraIntrinsics(fx=120.0, fy=115.0, cx=(width - 1) / 2, cy=(height - 1) / 2,
                         width=width, height=height)
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0.1, 0.8)
    world_to_cam = SE3Pose.from_matrix(so3_exp(w), rng.normal(size=3))
    cam_to_world = invert(world_to_cam)
    pts_world = np.empty((n_points, 3))
    pix = np.empty((n_points, 2))
    for i in range(n_points):
        pix[i] = [rng.uniform(5, width - 6), rng.uniform(5, height - 6)]
        p_cam = back_project(K, pix[i], rng.uniform(2.0, 10.0))
        pts_world[i] = transform_points(cam_to_world, p_cam)
    if noise:
        pix += rng.normal(0, noise, size=pix.shape)
    return K, world_to_cam, pts_world, pix


def test_pnp_exact_correspondences():
    rng = np.random.default_rng(1)
    for trial in range(10):
        K, truth, pts, pix = _pnp_problem(rng, 20)
        est = solve_pnp(pts, pix, K, seed=trial)
        assert est is not None
        assert np.linalg.norm(est.translation - truth.translation) <= 1e-6, trial
        assert rotation_angle(est.rotation_matrix.T @ truth.rotation_matrix) <= 1e-6


def test_pnp_with_outliers():
    rng = np.random.default_rng(2)
    for trial in range(10):
        K, truth, pts, pix = _pnp_problem(rng, 20)
        n_out = 6  # 30%
        idx = rng.choice(20, size=n_out, replace=False)
        pix[idx] = rng.uniform(0, 127, size=(n_out, 2))
        est = solve_pnp(pts, pix, K, seed=trial)
        assert est is not None
        assert np.linalg.norm(est.translation - truth.translation) <= 1e-3, trial


def test_pnp_too_few_points_raises():
    rng = np.random.default_rng(3)
    K, _, pts, pix = _pnp_problem(rng, 5)
    with pytest.raises(ValueError):
        solve_pnp(pts, pix, K)


def test_pnp_no_consensus_returns_none():
    rng = np.random.default_rng(4)
    K, _, pts, pix = _pnp_problem(rng, 6, noise=3.0)
    # With heavy noise and a vanishing inlier gate no consensus can form.
    assert solve_pnp(pts, pix, K, inlier_threshold=1e-9) is None


def test_pnp_deterministic():
    rng = np.random.default_rng(5)
    K, _, pts, pix = _pnp_problem(rng, 20)
    idx = rng.choice(20, size=6, replace=False)
    pix[idx] = rng.uniform(0, 127, size=(6, 2))
    a = solve_pnp(pts, pix, K, seed=11)
    b = solve_pnp(pts, pix, K, seed=11)
    assert np.array_equal(a.quaternion, b.quaternion)
    assert np.array_equal(a.translation, b.translation)


def _textured_image(rng, size=96, cell=8):
    """Grid of random gray levels: corner-rich and locally distinctive.

    A regular two-tone checkerboard defeats ORB's ratio test (every corner
    looks identical), so each cell gets its own random intensity.
    """
    n = size // cell
    cells = rng.uniform(0.05, 0.95, size=(n, n))
    img = np.kron(cells, np.ones((cell, cell)))[..., None].repeat(3, axis=2)
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0, 1)


def test_orb_backend_matches_shifted_image():
    rng = np.random.default_rng(6)
    img = _textured_image(rng)
    shifted = np.roll(img, 5, axis=1)
    backend = OrbFeatureBackend()
    pa, pb = backend.match(img, shifted)
    assert len(pa) >= 10
    # Most matches should reflect the 5 px horizontal shift.
    dx = pb[:, 0] - pa[:, 0]
    assert np.median(np.abs(dx - 5.0)) < 1.0


def test_match_features_selects_right_candidate_or_none():
    rng = np.random.default_rng(7)
    query = _textured_image(rng)
    similar = np.roll(query, 3, axis=0)
    unrelated = rng.uniform(0, 1, size=query.shape)
    backend = OrbFeatureBackend()
    got = match_features(query, [unrelated, similar], 10, backend)
    assert got is not None
    assert got.candidate_index == 1
    assert match_features(query, [unrelated], 10**9, backend) is None


def _textured_wall_scene(rng, size=96):
    """A folded wall of random bright/dark splats: corner-rich when rendered.

    The fold (depth growing with |x|) gives the scene real depth relief, so
    pose-from-correspondences is well conditioned; a single fronto-parallel
    plane would leave rotation and lateral translation nearly entangled.
    """
    K = CameraIntrinsics(fx=90.0, fy=90.0, cx=(size - 1) / 2, cy=(size - 1) / 2,
                         width=size, height=size)
    n_side = 30
    span = 4.0
    xs, ys = np.meshgrid(np.linspace(-span, span, n_side), np.linspace(-span, span, n_side))
    relief = 5.0 + 0.7 * np.abs(xs.ravel()) + 0.7 * np.abs(ys.ravel())
    pos = np.column_stack([xs.ravel(), ys.ravel(), relief])
    lum = rng.choice([0.1, 0.9], size=n_side * n_side)
    colors = np.column_stack([lum, lum, lum])
    colors += rng.uniform(-0.05, 0.05, colors.shape)
    spacing = 2 * span / (n_side - 1)
    gmap = GaussianMap.from_arrays(
        pos, np.clip(colors, 0, 1), np.full(len(pos), 0.95),
        np.full(len(pos), spacing * 0.8),
    )
    return gmap, K


def _frame_at(gmap, K, pose):
    truth = render(gmap, K, pose)
    scan_world = gmap.positions[rng_scan.choice(len(gmap), size=300, replace=False)]
    scan_sensor = transform_points(invert(pose), scan_world)
    scan_sensor = scan_sensor[scan_sensor[:, 2] > 0.1]
    return Frame.build(0.0, truth.color, PointCloud(scan_sensor), SE3Pose.identity(), K)


rng_scan = np.random.default_rng(1234)


def test_attempt_relocalize_recovers_pose():
    rng = np.random.default_rng(8)
    gmap, K = _textured_wall_scene(rng)
    true_pose = SE3Pose.identity()
    frame = _frame_at(gmap, K, true_pose)
    # Anchor yawed one ring step away: candidate 1 reproduces the true view.
    cfg = RelocConfig(look_around_count=8)
    anchor = SE3Pose.from_matrix(
        rotation_about_axis(np.array(cfg.up_axis), -2 * np.pi / 8) @ true_pose.rotation_matrix,
        true_pose.translation,
    )
    got = attempt_relocalize(gmap, frame, anchor, K, TrackingConfig(), cfg)
    assert got is not None
    assert np.linalg.norm(got.translation - true_pose.translation) < 0.05
    assert rotation_angle(got.rotation_matrix.T @ true_pose.rotation_matrix) < np.radians(1.0)


def test_attempt_relocalize_rejects_unmatchable_frame():
    rng = np.random.default_rng(9)
    gmap, K = _textured_wall_scene(rng)
    frame = _frame_at(gmap, K, SE3Pose.identity())
    noise_frame = Frame(
        timestamp=0.0,
        image=rng.uniform(0, 1, size=frame.image.shape),
        scan=frame.scan,
        sparse_depth=frame.sparse_depth,
        depth_valid=frame.depth_valid,
    )
    got = attempt_relocalize(gmap, noise_frame, SE3Pose.identity(), K,
                             TrackingConfig(), RelocConfig())
    assert got is None


def test_reloc_config_validation():
    with pytest.raises(ValueError):
        RelocConfig(rollback_frames=0)
    with pytest.raises(ValueError):
        RelocConfig(min_feature_matches=2)

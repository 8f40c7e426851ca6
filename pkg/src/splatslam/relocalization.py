"""Recovery from tracking failure: look-around rendering, feature matching,
PnP, and loss-gated verification.

After tracking fails, the map is frozen and each incoming frame is matched
against a ring of views rendered from an anchor pose (the pose from several
frames before the failure). Matched pixels are lifted to 3D through the
rendered depth, a RANSAC PnP solve proposes a camera pose, and the pose is
accepted only if the tracking loss at that pose falls below the failure
threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import cv2
import numpy as np

from .gaussian_map import GaussianMap
from .geometry import (
    CameraIntrinsics,
    SE3Pose,
    back_project,
    compose,
    invert,
    rotation_about_axis,
    se3_exp,
    transform_points,
)
from .optimization import TrackingConfig, tracking_loss
from .renderer import render
from .tracking import Frame

cv2.setNumThreads(1)  # keep feature extraction bit-deterministic


@dataclass
class RelocConfig:
    """Relocalization knobs (counts follow the system defaults)."""

    rollback_frames: int = 30
    look_around_count: int = 8
    min_feature_matches: int = 10
    up_axis: tuple = (0.0, -1.0, 0.0)
    pnp_seed: int = 0
    pnp_iterations: int = 200
    pnp_inlier_threshold: float = 2.0

    def __post_init__(self):
        if self.rollback_frames < 1:
            raise ValueError("rollback_frames must be at least 1")
        if self.look_around_count < 1:
            raise ValueError("look_around_count must be at least 1")
        if self.min_feature_matches < 4:
            raise ValueError("min_feature_matches must be at least 4")


def look_around(anchor: SE3Pose, count: int, up_axis=(0.0, -1.0, 0.0)) -> list[SE3Pose]:
    """Poses sharing the anchor position, yawed in equal steps about up_axis.

    The first pose is the anchor itself; rotations are applied in the world
    frame so the camera pivots in place about the global vertical.
    """
    poses = []
    axis = np.asarray(up_axis, dtype=np.float64)
    for k in range(count):
        R = rotation_about_axis(axis, 2.0 * np.pi * k / count)
        poses.append(SE3Pose.from_matrix(R @ anchor.rotation_matrix, anchor.translation))
    return poses


class FeatureBackend(Protocol):
    """Pluggable 2D feature matcher between two RGB float images."""

    def match(self, image_a: np.ndarray, image_b: np.ndarray):
        """Returns (pixels_a (M, 2), pixels_b (M, 2)) matched pairs."""
        ...


def _to_gray_u8(image: np.ndarray) -> np.ndarray:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    u8 = np.rint(img * 255.0).astype(np.uint8)
    return cv2.cvtColor(u8, cv2.COLOR_RGB2GRAY)


class OrbFeatureBackend:
    """ORB keypoints + mutual ratio-test matching (binary descriptors)."""

    def __init__(self, n_features: int = 1500, ratio: float = 0.8):
        self.orb = cv2.ORB_create(nfeatures=n_features)
        self.ratio = ratio
        self.matcher = cv2.BFMatcher(cv2.NORM_HAMMING)

    def _ratio_matches(self, da, db):
        if da is None or db is None or len(da) < 2 or len(db) < 2:
            return {}
        out = {}
        for pair in self.matcher.knnMatch(da, db, k=2):
            if len(pair) == 2 and pair[0].distance < self.ratio * pair[1].distance:
                out[pair[0].queryIdx] = pair[0].trainIdx
        return out

    def match(self, image_a: np.ndarray, image_b: np.ndarray):
        ga = _to_gray_u8(image_a)
        gb = _to_gray_u8(image_b)
        kpa, da = self.orb.detectAndCompute(ga, None)
        kpb, db = self.orb.detectAndCompute(gb, None)
        fwd = self._ratio_matches(da, db)
        bwd = self._ratio_matches(db, da)
        pa, pb = [], []
        for qa, qb in fwd.items():
            if bwd.get(qb) == qa:
                pa.append(kpa[qa].pt)
                pb.append(kpb[qb].pt)
        if not pa:
            return np.zeros((0, 2)), np.zeros((0, 2))
        return np.asarray(pa, dtype=np.float64), np.asarray(pb, dtype=np.float64)


@dataclass
class FeatureMatchSet:
    """Matches between the query frame and the winning candidate render."""

    candidate_index: int
    query_pixels: np.ndarray
    candidate_pixels: np.ndarray


def match_features(
    query_image: np.ndarray,
    candidate_images: list,
    min_matches: int,
    backend: FeatureBackend,
) -> FeatureMatchSet | None:
    """Match the query against every candidate; keep the strongest.

    Returns None when no candidate clears `min_matches` (strictly more
    matches are required). Ties keep the lowest candidate index.
    """
    best = None
    for i, cand in enumerate(candidate_images):
        qp, cp = backend.match(query_image, cand)
        if best is None or len(qp) > len(best.query_pixels):
            best = FeatureMatchSet(i, qp, cp)
    if best is None or len(best.query_pixels) <= min_matches:
        return None
    return best


# --- PnP --------------------------------------------------------------------


def _normalize_points_3d(X: np.ndarray):
    centroid = X.mean(axis=0)
    scale = np.mean(np.linalg.norm(X - centroid, axis=1))
    if scale < 1e-12:
        scale = 1.0
    s = np.sqrt(3.0) / scale
    T = np.eye(4)
    T[:3, :3] *= s
    T[:3, 3] = -s * centroid
    return (X - centroid) * s, T


def _planar_pose(points: np.ndarray, norm_pix: np.ndarray) -> SE3Pose | None:
    """Pose from coplanar points via a plane-to-image homography.

    The projective DLT is rank-deficient when every 3D point lies on one
    plane (walls, floors), so the pose is recovered from the homography
    mapping in-plane coordinates to normalized image coordinates instead.
    """
    n = points.shape[0]
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, _, Vt = np.linalg.svd(centered, full_matrices=False)
    basis = Vt[:2].T  # (3, 2) orthonormal in-plane directions
    ab = centered @ basis

    # Hartley-normalize both sides for conditioning.
    def _norm2d(x):
        c = x.mean(axis=0)
        s = np.mean(np.linalg.norm(x - c, axis=1))
        s = np.sqrt(2.0) / s if s > 1e-12 else 1.0
        T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
        return (x - c) * s, T

    ab_n, T_ab = _norm2d(ab)
    pix_n, T_pix = _norm2d(norm_pix)
    A = np.zeros((2 * n, 9))
    src = np.concatenate([ab_n, np.ones((n, 1))], axis=1)
    A[0::2, 0:3] = src
    A[0::2, 6:9] = -pix_n[:, 0:1] * src
    A[1::2, 3:6] = src
    A[1::2, 6:9] = -pix_n[:, 1:2] * src
    _, _, Vh = np.linalg.svd(A, full_matrices=False)
    Hn = Vh[-1].reshape(3, 3)
    H = np.linalg.inv(T_pix) @ Hn @ T_ab
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    scale = 0.5 * (np.linalg.norm(h1) + np.linalg.norm(h2))
    if scale < 1e-12:
        return None
    H = H / scale
    # Points must be in front of the camera: the plane origin projects to
    # depth h3_z after scaling; flip the homography sign if negative.
    if H[2, 2] < 0:
        H = -H
    r1, r2 = H[:, 0], H[:, 1]
    r3 = np.cross(r1, r2)
    U, _, Vr = np.linalg.svd(np.column_stack([r1, r2, r3]))
    det = np.linalg.det(U @ Vr)
    R_plane = U @ np.diag([1.0, 1.0, det]) @ Vr
    b3 = np.cross(basis[:, 0], basis[:, 1])
    world_basis = np.column_stack([basis, b3])
    R = R_plane @ world_basis.T
    t = H[:, 2] - R @ centroid
    pose = SE3Pose.from_matrix(R, t)
    depths = transform_points(pose, points)[:, 2]
    if np.count_nonzero(depths > 0) < n / 2:
        return None
    return pose


def _dlt_pose(points: np.ndarray, norm_pix: np.ndarray) -> SE3Pose | None:
    """Direct linear transform for [R|t] from normalized image coordinates."""
    n = points.shape[0]
    Xn, T = _normalize_points_3d(points)
    Xh = np.concatenate([Xn, np.ones((n, 1))], axis=1)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -norm_pix[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -norm_pix[:, 1:2] * Xh
    _, _, Vt = np.linalg.svd(A, full_matrices=False)
    P = Vt[-1].reshape(3, 4) @ T  # undo the 3D normalization
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    U, S, Vt2 = np.linalg.svd(M)
    scale = S.mean()
    if scale < 1e-12:
        return None
    R = U @ Vt2
    if np.linalg.det(R) < 0:
        return None
    t = P[:, 3] / scale
    pose = SE3Pose.from_matrix(R, t)
    # Cheirality: the majority of points must sit in front of the camera.
    depths = transform_points(pose, points)[:, 2]
    if np.count_nonzero(depths > 0) < n / 2:
        return None
    return pose


def _solve_minimal(points: np.ndarray, norm_pix: np.ndarray) -> SE3Pose | None:
    """DLT for general point sets, homography route for (near-)planar ones."""
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] < 1e-12 or sv[2] / sv[0] < 1e-4:
        return _planar_pose(points, norm_pix)
    return _dlt_pose(points, norm_pix)


def _reprojection_errors(pose: SE3Pose, points, pixels, K: CameraIntrinsics):
    q = transform_points(pose, points)
    z = q[:, 2]
    ok = z > 1e-9
    err = np.full(points.shape[0], np.inf)
    zs = np.where(ok, z, 1.0)
    u = K.fx * q[:, 0] / zs + K.cx
    v = K.fy * q[:, 1] / zs + K.cy
    err[ok] = np.hypot(u - pixels[:, 0], v - pixels[:, 1])[ok]
    return err


def _gauss_newton_refine(pose, points, pixels, K, iterations=15):
    for _ in range(iterations):
        q = transform_points(pose, points)
        z = q[:, 2]
        ok = z > 1e-9
        if np.count_nonzero(ok) < 3:
            return pose
        qo = q[ok]
        zo = qo[:, 2]
        ru = K.fx * qo[:, 0] / zo + K.cx - pixels[ok, 0]
        rv = K.fy * qo[:, 1] / zo + K.cy - pixels[ok, 1]
        n = qo.shape[0]
        # d(residual)/dq, then chain through the left se3 perturbation
        # dq = dtheta x q + drho.
        Jq = np.zeros((n, 2, 3))
        Jq[:, 0, 0] = K.fx / zo
        Jq[:, 0, 2] = -K.fx * qo[:, 0] / zo ** 2
        Jq[:, 1, 1] = K.fy / zo
        Jq[:, 1, 2] = -K.fy * qo[:, 1] / zo ** 2
        Jxi = np.zeros((n, 3, 6))
        Jxi[:, 0, 1] = qo[:, 2]
        Jxi[:, 0, 2] = -qo[:, 1]
        Jxi[:, 1, 0] = -qo[:, 2]
        Jxi[:, 1, 2] = qo[:, 0]
        Jxi[:, 2, 0] = qo[:, 1]
        Jxi[:, 2, 1] = -qo[:, 0]
        Jxi[:, 0, 3] = 1.0
        Jxi[:, 1, 4] = 1.0
        Jxi[:, 2, 5] = 1.0
        J = np.einsum("nij,njk->nik", Jq, Jxi).reshape(2 * n, 6)
        r = np.column_stack([ru, rv]).reshape(2 * n)
        H = J.T @ J + 1e-12 * np.eye(6)
        try:
            step = np.linalg.solve(H, -J.T @ r)
        except np.linalg.LinAlgError:
            return pose
        pose = compose(se3_exp(step), pose)
        if np.linalg.norm(step) < 1e-14:
            break
    return pose


def solve_pnp(
    points_world: np.ndarray,
    pixels: np.ndarray,
    intrinsics: CameraIntrinsics,
    seed: int = 0,
    ransac_iterations: int = 200,
    inlier_threshold: float = 2.0,
    min_inliers: int = 6,
) -> SE3Pose | None:
    """World-to-camera pose from 3D-2D correspondences (RANSAC + DLT + GN).

    Args:
        points_world: (M, 3) world points, M >= 6.
        pixels: (M, 2) observed pixel positions.
        intrinsics: camera model (no distortion).
        seed: RANSAC sampling seed; identical inputs and seed give an
            identical result.
        inlier_threshold: reprojection gate in pixels.

    Returns:
        The world-to-camera SE3Pose, or None when no consensus set of at
        least `min_inliers` emerges.

    Raises:
        ValueError: fewer than 6 correspondences were supplied.
    """
    points = np.asarray(points_world, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    m = points.shape[0]
    if m < 6:
        raise ValueError(f"PnP needs at least 6 correspondences, got {m}")
    if pixels.shape != (m, 2):
        raise ValueError("pixels shape does not match points")
    norm_pix = np.column_stack([
        (pixels[:, 0] - intrinsics.cx) / intrinsics.fx,
        (pixels[:, 1] - intrinsics.cy) / intrinsics.fy,
    ])
    rng = np.random.default_rng(seed)
    best_count = 0
    best_inliers = None
    for _ in range(ransac_iterations):
        sample = rng.choice(m, size=6, replace=False)
        cand = _solve_minimal(points[sample], norm_pix[sample])
        if cand is None:
            continue
        err = _reprojection_errors(cand, points, pixels, intrinsics)
        inliers = err <= inlier_threshold
        count = int(np.count_nonzero(inliers))
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None or best_count < min_inliers:
        return None
    pose = _solve_minimal(points[best_inliers], norm_pix[best_inliers])
    if pose is None:
        return None
    pose = _gauss_newton_refine(pose, points[best_inliers], pixels[best_inliers], intrinsics)
    # One re-gating round: the refined pose may rescue borderline inliers.
    err = _reprojection_errors(pose, points, pixels, intrinsics)
    inliers = err <= inlier_threshold
    if int(np.count_nonzero(inliers)) >= min_inliers:
        pose = _gauss_newton_refine(pose, points[inliers], pixels[inliers], intrinsics)
    return pose


# --- Full relocalization attempt -------------------------------------------


def attempt_relocalize(
    gmap: GaussianMap,
    frame: Frame,
    anchor_pose: SE3Pose,
    intrinsics: CameraIntrinsics,
    tracking_cfg: TrackingConfig,
    reloc_cfg: RelocConfig,
    backend: FeatureBackend | None = None,
) -> SE3Pose | None:
    """One relocalization attempt for one incoming frame.

    Renders a look-around ring at the anchor, picks the candidate with the
    most feature matches against the frame's image, lifts the matched
    candidate pixels to world points through the rendered depth, solves
    PnP, and verifies the recovered pose by the tracking loss. Returns the
    verified camera pose, or None (caller should retry on the next frame).
    """
    if backend is None:
        backend = OrbFeatureBackend()
    poses = look_around(anchor_pose, reloc_cfg.look_around_count, reloc_cfg.up_axis)
    renders = [
        render(gmap, intrinsics, p, transmittance_floor=tracking_cfg.transmittance_floor)
        for p in poses
    ]
    matches = match_features(
        frame.image, [r.color for r in renders], reloc_cfg.min_feature_matches, backend
    )
    if matches is None:
        return None
    cand_render = renders[matches.candidate_index]
    cand_pose = poses[matches.candidate_index]
    picked_points = []
    picked_pixels = []
    for qp, cp in zip(matches.query_pixels, matches.candidate_pixels):
        u = int(round(cp[0]))
        v = int(round(cp[1]))
        if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
            continue
        sil = cand_render.silhouette[v, u]
        if sil <= tracking_cfg.silhouette_threshold:
            continue
        # The raw depth channel is attenuated by (1 - transmittance left);
        # dividing by the silhouette recovers the expected surface depth.
        depth = cand_render.depth[v, u] / sil
        if depth <= 0.0:
            continue
        p_cam = back_project(intrinsics, np.array([float(u), float(v)]), depth)
        picked_points.append(transform_points(cand_pose, p_cam))
        picked_pixels.append(qp)
    if len(picked_points) < 6:
        return None
    world_to_cam = solve_pnp(
        np.asarray(picked_points),
        np.asarray(picked_pixels),
        intrinsics,
        seed=reloc_cfg.pnp_seed,
        ransac_iterations=reloc_cfg.pnp_iterations,
        inlier_threshold=reloc_cfg.pnp_inlier_threshold,
    )
    if world_to_cam is None:
        return None
    camera_pose = invert(world_to_cam)
    check = render(gmap, intrinsics, camera_pose,
                   transmittance_floor=tracking_cfg.transmittance_floor)
    loss = tracking_loss(check, frame.image, frame.sparse_depth, frame.depth_valid,
                         tracking_cfg)
    if loss < tracking_cfg.failure_threshold:
        return camera_pose
    return None

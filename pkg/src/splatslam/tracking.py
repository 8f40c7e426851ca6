"""Per-frame pose tracking: ICP initialization plus rendered-loss refinement.

The LiDAR pose is first aligned against the map's LiDAR-originated points
with point-to-point ICP, then the derived camera pose is refined by Adam
on the silhouette-masked depth + color loss. Tracking failure (degenerate
registration or a refined loss above the failure threshold) is reported,
not raised, so the caller can switch into relocalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .gaussian_map import GaussianMap
from .geometry import (
    CameraIntrinsics,
    PointCloud,
    SE3Pose,
    apply_pose_step,
    compose,
    invert,
    se3_log,
)
from .optimization import AdamState, TrackingConfig, adam_step, tracking_loss_with_gradients
from .renderer import render, render_backward

ICP_SCAN_VOXEL = 0.5
ICP_MAP_VOXEL = 0.25
ICP_MAX_CORR_DIST = 2.0
ICP_MAX_ITERATIONS = 50
ICP_CONVERGENCE_TOL = 1e-6
ICP_MIN_CORRESPONDENCES = 10


class DegenerateRegistration(RuntimeError):
    """ICP could not find enough correspondences to constrain the pose."""


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Keep the first point (in input order) of each occupied voxel.

    voxel <= 0 disables downsampling. Deterministic for a given input order.
    """
    pts = np.asarray(points, dtype=np.float64)
    if voxel <= 0.0 or pts.shape[0] == 0:
        return pts.copy()
    cells = np.floor(pts / voxel).astype(np.int64)
    off = np.int64(1) << np.int64(20)
    keys = ((cells[:, 0] + off) << 42) + ((cells[:, 1] + off) << 21) + (cells[:, 2] + off)
    _, first = np.unique(keys, return_index=True)
    return pts[np.sort(first)]


class _VoxelHashNN:
    """Exact nearest neighbor within a radius, via a 27-cell voxel hash.

    The cell size equals the query radius, so scanning a query's 3x3x3
    cell neighborhood is guaranteed to see every candidate within range.
    """

    def __init__(self, points: np.ndarray, radius: float):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.radius = float(radius)
        cells = np.floor(self.points / self.radius).astype(np.int64)
        off = np.int64(1) << np.int64(20)
        keys = ((cells[:, 0] + off) << 42) + ((cells[:, 1] + off) << 21) + (cells[:, 2] + off)
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        unique_keys, start = np.unique(sorted_keys, return_index=True)
        self._keys = unique_keys
        self._slot = order
        self._start = np.append(start, len(order)).astype(np.int64)

    def query(self, queries: np.ndarray):
        """Returns (indices, squared distances); index -1 = none in range."""
        q = np.ascontiguousarray(queries, dtype=np.float64)
        return _kernels.voxel_nn_query(
            q, self._keys, self._slot, self._start, self.points, self.radius, self.radius
        )


def _kabsch(source: np.ndarray, target: np.ndarray) -> SE3Pose:
    """Least-squares rigid transform taking source points onto target points."""
    sc = source.mean(axis=0)
    tc = target.mean(axis=0)
    H = (source - sc).T @ (target - tc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    return SE3Pose.from_matrix(R, tc - R @ sc)


def icp_register(
    scan: PointCloud,
    map_points: PointCloud,
    initial_guess: SE3Pose,
    scan_voxel: float = ICP_SCAN_VOXEL,
    max_corr_dist: float = ICP_MAX_CORR_DIST,
    max_iterations: int = ICP_MAX_ITERATIONS,
    tol: float = ICP_CONVERGENCE_TOL,
    min_correspondences: int = ICP_MIN_CORRESPONDENCES,
) -> SE3Pose:
    """Point-to-point ICP aligning a scan onto map points.

    Args:
        scan: points in the sensor frame.
        map_points: points in the world frame (used as-is).
        initial_guess: starting sensor-to-world transform.
        scan_voxel: scan-side downsampling cell (<= 0 keeps every point).

    Returns:
        The refined sensor-to-world transform.

    Raises:
        DegenerateRegistration: fewer than `min_correspondences` scan points
            found a map point within `max_corr_dist` at some iteration.
    """
    src = voxel_downsample(scan.points, scan_voxel)
    if src.shape[0] < min_correspondences or len(map_points) == 0:
        raise DegenerateRegistration(
            f"{src.shape[0]} scan points after downsampling, "
            f"{len(map_points)} map points"
        )
    nn = _VoxelHashNN(map_points.points, max_corr_dist)
    pose = initial_guess
    for _ in range(max_iterations):
        moved = src @ pose.rotation_matrix.T + pose.translation
        idx, _ = nn.query(moved)
        got = idx >= 0
        if int(np.count_nonzero(got)) < min_correspondences:
            raise DegenerateRegistration(
                f"only {int(np.count_nonzero(got))} correspondences within "
                f"{max_corr_dist} m"
            )
        delta = _kabsch(moved[got], nn.points[idx[got]])
        pose = compose(delta, pose)
        if np.linalg.norm(se3_log(delta)) < tol:
            break
    return pose


def build_sparse_depth(
    scan: PointCloud,
    lidar_to_camera: SE3Pose,
    intrinsics: CameraIntrinsics,
    near_plane: float = 0.01,
):
    """Z-buffer LiDAR points into the image plane.

    Returns (depth (H, W), valid (H, W) bool); pixels no point hits are
    invalid with depth 0. The nearest point wins where several land on one
    pixel.
    """
    H, W = intrinsics.height, intrinsics.width
    depth = np.full((H, W), np.inf)
    q = scan.points @ lidar_to_camera.rotation_matrix.T + lidar_to_camera.translation
    z = q[:, 2]
    front = z > near_plane
    q = q[front]
    z = z[front]
    if z.size:
        u = np.rint(intrinsics.fx * q[:, 0] / z + intrinsics.cx).astype(np.int64)
        v = np.rint(intrinsics.fy * q[:, 1] / z + intrinsics.cy).astype(np.int64)
        in_img = (u >= 0) & (u < W) & (v >= 0) & (v < H)
        np.minimum.at(depth, (v[in_img], u[in_img]), z[in_img])
    valid = np.isfinite(depth)
    depth[~valid] = 0.0
    return depth, valid


@dataclass
class Frame:
    """One synchronized LiDAR + camera observation."""

    timestamp: float
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    scan: PointCloud  # sensor-frame points
    sparse_depth: np.ndarray  # (H, W) projected LiDAR depth
    depth_valid: np.ndarray  # (H, W) bool

    @classmethod
    def build(cls, timestamp, image, scan, lidar_to_camera, intrinsics) -> "Frame":
        depth, valid = build_sparse_depth(scan, lidar_to_camera, intrinsics)
        return cls(timestamp, np.asarray(image, dtype=np.float64), scan, depth, valid)


@dataclass
class TrackingResult:
    lidar_pose: SE3Pose
    camera_pose: SE3Pose
    loss: float
    failed: bool
    icp_degenerate: bool = False


def refine_camera_pose(
    gmap: GaussianMap,
    frame: Frame,
    camera_pose: SE3Pose,
    intrinsics: CameraIntrinsics,
    cfg: TrackingConfig,
):
    """Adam descent of the tracking loss over the camera pose.

    Follows a best-iterate policy: every candidate pose is scored and the
    lowest-loss one is returned, so a late oscillation cannot spoil an
    earlier good fit. Returns (pose, loss) with loss evaluated at the
    returned pose.
    """
    lr = np.concatenate([np.full(3, cfg.rotation_lr), np.full(3, cfg.translation_lr)])
    state = AdamState.zeros(6)
    best_pose = camera_pose
    best_loss = np.inf
    pose = camera_pose
    for _ in range(cfg.iterations):
        rendered = render(gmap, intrinsics, pose, transmittance_floor=cfg.transmittance_floor)
        loss, (d_color, d_depth, d_sil) = tracking_loss_with_gradients(
            rendered, frame.image, frame.sparse_depth, frame.depth_valid, cfg
        )
        if loss < best_loss:
            best_loss = loss
            best_pose = pose
        grads = render_backward(gmap, rendered, d_color=d_color, d_depth=d_depth,
                                d_silhouette=d_sil)
        step = adam_step(np.zeros(6), grads.pose, state, lr)
        pose = apply_pose_step(pose, step)
    # Score the final iterate too; the loop above scores before stepping.
    rendered = render(gmap, intrinsics, pose, transmittance_floor=cfg.transmittance_floor)
    loss, _ = tracking_loss_with_gradients(
        rendered, frame.image, frame.sparse_depth, frame.depth_valid, cfg
    )
    if loss < best_loss:
        best_loss = loss
        best_pose = pose
    return best_pose, float(best_loss)


def track_frame(
    gmap: GaussianMap,
    frame: Frame,
    prev_lidar_pose: SE3Pose,
    camera_to_lidar: SE3Pose,
    intrinsics: CameraIntrinsics,
    cfg: TrackingConfig,
    refine: bool = True,
    scan_voxel: float = ICP_SCAN_VOXEL,
) -> TrackingResult:
    """Estimate this frame's poses against the current map.

    ICP aligns the scan to the map's LiDAR points (seeded with the previous
    frame's refined LiDAR pose), the camera pose follows through the
    camera-to-lidar extrinsic, and Adam refinement of the rendered loss
    finishes the job. The refined camera pose is re-projected back into a
    refined LiDAR pose so the next frame's ICP starts from it.

    `camera_to_lidar` maps camera-frame points into the LiDAR frame.
    """
    map_points = voxel_downsample(gmap.extract_lidar_points().points, ICP_MAP_VOXEL)
    try:
        lidar_pose = icp_register(
            frame.scan, PointCloud(map_points), prev_lidar_pose, scan_voxel=scan_voxel
        )
    except DegenerateRegistration:
        camera_pose = compose(prev_lidar_pose, camera_to_lidar)
        return TrackingResult(prev_lidar_pose, camera_pose, np.inf, True, icp_degenerate=True)

    camera_pose = compose(lidar_pose, camera_to_lidar)
    if refine and len(gmap) and cfg.iterations > 0:
        camera_pose, loss = refine_camera_pose(gmap, frame, camera_pose, intrinsics, cfg)
    else:
        rendered = render(gmap, intrinsics, camera_pose,
                          transmittance_floor=cfg.transmittance_floor)
        loss, _ = tracking_loss_with_gradients(
            rendered, frame.image, frame.sparse_depth, frame.depth_valid, cfg
        )
    failed = loss > cfg.failure_threshold
    lidar_pose = compose(camera_pose, invert(camera_to_lidar))
    return TrackingResult(lidar_pose, camera_pose, loss, failed)

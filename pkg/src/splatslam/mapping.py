"""Map expansion from tracked scans, keyframe selection, map optimization.

Expansion converts each tracked frame's scan into new splats: points go to
world coordinates through the estimated camera pose and the LiDAR-camera
extrinsic, take their color from the pixel they project to, and enter the
map with the depth-scaled initial radius. Keyframes retain the observed
image and estimated pose; the update stage renders randomly chosen
keyframes and descends the photometric loss over all splat attributes,
then prunes and densifies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian_map import GaussianMap
from .geometry import (
    CameraIntrinsics,
    PointCloud,
    SE3Pose,
    compose,
    invert,
)
from .optimization import (
    AdamState,
    MappingConfig,
    adam_step,
    mapping_loss_with_gradients,
)
from .renderer import DEFAULT_NEAR_PLANE, render, render_backward


@dataclass(frozen=True)
class Keyframe:
    """A retained frame: observed image plus its estimated camera pose."""

    index: int
    timestamp: float
    image: np.ndarray
    camera_pose: SE3Pose


class KeyframeSequence:
    """Ordered, growing keyframe store with an insertion interval."""

    def __init__(self, interval: int = 5):
        if interval < 1:
            raise ValueError("interval must be >= 1")
        self.interval = interval
        self._frames: list[Keyframe] = []

    def __len__(self) -> int:
        return len(self._frames)

    def __getitem__(self, i: int) -> Keyframe:
        return self._frames[i]

    def __iter__(self):
        return iter(self._frames)

    @property
    def latest(self) -> Keyframe:
        return self._frames[-1]

    def append(self, keyframe: Keyframe) -> None:
        if self._frames and keyframe.timestamp <= self._frames[-1].timestamp:
            raise ValueError("keyframe timestamps must strictly increase")
        self._frames.append(keyframe)


def expand_map(
    gmap: GaussianMap,
    image: np.ndarray,
    scan: PointCloud,
    camera_pose: SE3Pose,
    lidar_to_camera: SE3Pose,
    intrinsics: CameraIntrinsics,
    stride: int = 1,
    near_plane: float = DEFAULT_NEAR_PLANE,
) -> int:
    """Insert one splat per in-frustum scan point; returns the count.

    The scan (sensor frame) moves to world through the LiDAR pose implied
    by the camera pose and extrinsic. Points whose projection falls outside
    the image (or behind the camera) are skipped: they have no color.
    `stride` subsamples the scan for desk-scale runs.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    points = scan.points[::stride]
    if len(points) == 0:
        return 0
    lidar_pose = compose(camera_pose, lidar_to_camera)
    R_w = lidar_pose.rotation_matrix
    points_world = points @ R_w.T + lidar_pose.translation
    world_to_cam = invert(camera_pose)
    q = points_world @ world_to_cam.rotation_matrix.T + world_to_cam.translation
    depth = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(intrinsics.fx * q[:, 0] / depth + intrinsics.cx)
        v = np.rint(intrinsics.fy * q[:, 1] / depth + intrinsics.cy)
    valid = ((depth > near_plane)
             & (u >= 0) & (u < intrinsics.width)
             & (v >= 0) & (v < intrinsics.height))
    if not np.any(valid):
        return 0
    colors = image[v[valid].astype(int), u[valid].astype(int)]
    return gmap.insert_from_scan(PointCloud(points_world[valid]), colors,
                                 depth[valid], intrinsics)


def projection_overlap(
    points_world: np.ndarray,
    camera_pose: SE3Pose,
    intrinsics: CameraIntrinsics,
) -> int:
    """How many world points fall inside this camera's image with d > 0."""
    if len(points_world) == 0:
        return 0
    world_to_cam = invert(camera_pose)
    q = points_world @ world_to_cam.rotation_matrix.T + world_to_cam.translation
    depth = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * q[:, 0] / depth + intrinsics.cx
        v = intrinsics.fy * q[:, 1] / depth + intrinsics.cy
    inside = ((depth > 0)
              & (u >= 0) & (u <= intrinsics.width - 1)
              & (v >= 0) & (v <= intrinsics.height - 1))
    return int(np.count_nonzero(inside))


def select_keyframes(
    keyframes: KeyframeSequence,
    scan_world: np.ndarray,
    intrinsics: CameraIntrinsics,
    k: int,
) -> list[Keyframe]:
    """Pick the mapping working set for the current frame.

    The current frame (the sequence's last entry) and the latest previous
    keyframe are always in; the remaining k - 2 slots go to the keyframes
    seeing the most of the current scan (world points projecting inside
    their image with positive depth). Ties break toward older frames. With
    fewer than k keyframes available, all are returned.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(keyframes) == 0:
        raise ValueError("no keyframes")
    if len(keyframes) <= k:
        return list(keyframes)
    current = keyframes[len(keyframes) - 1]
    latest_prev = keyframes[len(keyframes) - 2]
    rest = [keyframes[i] for i in range(len(keyframes) - 2)]
    counts = [projection_overlap(scan_world, kf.camera_pose, intrinsics)
              for kf in rest]
    order = sorted(range(len(rest)), key=lambda i: (-counts[i], rest[i].index))
    chosen = [rest[i] for i in order[: k - 2]]
    return [current, latest_prev] + chosen


def update_map(
    gmap: GaussianMap,
    selected: list[Keyframe],
    intrinsics: CameraIntrinsics,
    cfg: MappingConfig,
    rng: np.random.Generator,
) -> float:
    """Optimize splat attributes against the selected keyframes in place.

    Each iteration renders one randomly chosen keyframe at its stored pose
    (poses are never optimized here) and Adam-steps positions, colors,
    opacities, and radii on the photometric loss, clamping attributes back
    to their valid ranges. Densification statistics accumulate during the
    backward passes; afterwards the map is pruned, then densified, and the
    last iteration's loss is returned.
    """
    if not selected:
        raise ValueError("no keyframes selected")
    state_pos = AdamState.zeros(gmap.positions.shape)
    state_col = AdamState.zeros(gmap.colors.shape)
    state_opa = AdamState.zeros(gmap.opacities.shape)
    state_rad = AdamState.zeros(gmap.radii.shape)
    loss = 0.0
    for _ in range(cfg.iterations):
        kf = selected[int(rng.integers(len(selected)))]
        frame = render(gmap, intrinsics, kf.camera_pose,
                       transmittance_floor=cfg.transmittance_floor)
        loss, d_color = mapping_loss_with_gradients(frame.color, kf.image,
                                                    cfg.ssim_weight)
        if loss < 1e-12:
            # Exact match. Stepping anyway would let rounding noise in the
            # gradient, amplified by Adam's epsilon normalization, kick the
            # L1 term's residual signs awake and walk off the fixed point.
            continue
        grads = render_backward(gmap, frame, d_color=d_color,
                                accumulate_stats=True)
        gmap.positions = adam_step(gmap.positions, grads.positions,
                                   state_pos, cfg.position_lr)
        gmap.colors = np.clip(
            adam_step(gmap.colors, grads.colors, state_col, cfg.color_lr),
            0.0, 1.0)
        gmap.opacities = np.clip(
            adam_step(gmap.opacities, grads.opacities, state_opa,
                      cfg.opacity_lr), 0.0, 1.0)
        gmap.radii = np.maximum(
            adam_step(gmap.radii, grads.radii, state_rad, cfg.radius_lr),
            1e-6)
    gmap.prune(cfg.prune_opacity_min, cfg.prune_radius_max)
    gmap.densify(cfg.densify_grad_threshold)
    return loss

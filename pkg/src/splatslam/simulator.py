"""Synthetic worlds and sensor models for closed-loop verification.

A scene is a ground-truth splat map built from textured surfaces (ground
plane, walls, boxes, spheres). The virtual LiDAR measures depth by
rendering that map over a 70x77 degree forward frustum, one ray per pixel,
so scans and images share a single source of geometric truth. Sequences
export to the on-disk dataset layout in :mod:`splatslam.dataset`.

World frame convention: +z forward, +y down; the ground plane sits below
the sensor origin at positive y.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dataset as dataset_io
from .gaussian_map import GaussianMap
from .geometry import (
    CameraIntrinsics,
    PointCloud,
    SE3Pose,
    compose,
    invert,
    rotation_about_axis,
    transform_points,
)
from .renderer import render

LIDAR_FOV_H_DEG = 70.0
LIDAR_FOV_V_DEG = 77.0
DEFAULT_RANGE_NOISE = 0.01
SCAN_SILHOUETTE_MIN = 0.95

DEFAULT_BOX = np.array([[-8.0, -2.5, -3.0], [8.0, 1.5, 13.0]])


@dataclass(frozen=True)
class SyntheticScene:
    """Ground-truth world: a splat map plus its bounding box and seed."""

    gmap: GaussianMap
    box: np.ndarray  # (2, 3) min/max corners, meters
    seed: int

    def __post_init__(self):
        if len(self.gmap) == 0:
            raise ValueError("scene must be non-empty")


@dataclass(frozen=True)
class TrajectorySpec:
    """Timestamped ground-truth LiDAR poses plus the camera extrinsic."""

    timestamps: np.ndarray  # (N,) seconds
    lidar_poses: tuple[SE3Pose, ...]  # LiDAR-to-world per frame
    lidar_to_camera: SE3Pose  # maps LiDAR coordinates into camera coordinates

    def __post_init__(self):
        object.__setattr__(self, "timestamps",
                           np.asarray(self.timestamps, dtype=np.float64))
        object.__setattr__(self, "lidar_poses", tuple(self.lidar_poses))
        if len(self.timestamps) != len(self.lidar_poses):
            raise ValueError("timestamp/pose count mismatch")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must strictly increase")

    def __len__(self) -> int:
        return len(self.lidar_poses)

    def camera_pose(self, index: int) -> SE3Pose:
        """Camera-to-world pose for one frame."""
        return compose(self.lidar_poses[index], invert(self.lidar_to_camera))


def _allocate(count: int, weights: np.ndarray) -> np.ndarray:
    """Split `count` into integer parts proportional to `weights`."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = count * weights / weights.sum()
    parts = np.floor(raw).astype(int)
    short = count - parts.sum()
    # Hand the remainder to the largest fractional parts, ties by index.
    order = np.argsort(-(raw - parts), kind="stable")
    parts[order[:short]] += 1
    return parts


def _grid_points(n: int, extent_u: float, extent_v: float, rng) -> np.ndarray:
    """n jittered points stratified over a [0,eu] x [0,ev] rectangle."""
    if n <= 0:
        return np.zeros((0, 2))
    nu = max(1, int(round(math.sqrt(n * extent_u / extent_v))))
    nv = max(1, math.ceil(n / nu))
    iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    cells = np.column_stack([iu.ravel(), iv.ravel()]).astype(np.float64)
    jitter = rng.uniform(0.0, 1.0, size=cells.shape)
    uv = (cells + jitter) / [nu, nv] * [extent_u, extent_v]
    if len(uv) > n:
        uv = uv[rng.permutation(len(uv))[:n]]
    return uv


def _cell_colors(uv: np.ndarray, extent_u: float, extent_v: float,
                 cell: float, rng) -> np.ndarray:
    """Random-per-cell RGB texture sampled at the given surface points.

    Every cell of a `cell`-sized grid gets its own random color, so rendered
    views are rich in corners with locally distinctive neighborhoods (a
    regular two-tone checker defeats ratio-test feature matching).
    """
    nu = max(1, math.ceil(extent_u / cell))
    nv = max(1, math.ceil(extent_v / cell))
    palette = rng.uniform(0.05, 0.95, size=(nu, nv, 3))
    iu = np.clip((uv[:, 0] / cell).astype(int), 0, nu - 1)
    iv = np.clip((uv[:, 1] / cell).astype(int), 0, nv - 1)
    return palette[iu, iv]


def _gradient_colors(uv: np.ndarray, extent_u: float, extent_v: float,
                     rng) -> np.ndarray:
    """Linear blend between two random colors along a random direction."""
    c0 = rng.uniform(0.05, 0.95, size=3)
    c1 = rng.uniform(0.05, 0.95, size=3)
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)
    s = uv / [extent_u, extent_v] @ direction
    s = (s - s.min()) / max(s.max() - s.min(), 1e-9)
    return c0 + s[:, None] * (c1 - c0)


def _surface_radius(n: int, area: float) -> float:
    return 0.85 * math.sqrt(area / max(n, 1))


class _SceneBuilder:
    def __init__(self, rng):
        self.rng = rng
        self.positions = []
        self.colors = []
        self.radii = []

    def add_rect(self, n: int, origin, edge_u, edge_v, texture_cell: float | None):
        """n splats on a textured parallelogram patch."""
        if n <= 0:
            return
        origin = np.asarray(origin, dtype=np.float64)
        edge_u = np.asarray(edge_u, dtype=np.float64)
        edge_v = np.asarray(edge_v, dtype=np.float64)
        eu = np.linalg.norm(edge_u)
        ev = np.linalg.norm(edge_v)
        uv = _grid_points(n, eu, ev, self.rng)
        pos = origin + uv[:, :1] * (edge_u / eu) + uv[:, 1:] * (edge_v / ev)
        if texture_cell is None:
            col = _gradient_colors(uv, eu, ev, self.rng)
        else:
            col = _cell_colors(uv, eu, ev, texture_cell, self.rng)
        self.positions.append(pos)
        self.colors.append(col)
        self.radii.append(np.full(len(pos), _surface_radius(n, eu * ev)))

    def add_sphere(self, n: int, center, radius: float):
        """n splats on a sphere, colored by a latitude gradient."""
        if n <= 0:
            return
        center = np.asarray(center, dtype=np.float64)
        # Fibonacci lattice: near-uniform coverage at any count.
        i = np.arange(n, dtype=np.float64)
        phi = math.pi * (3.0 - math.sqrt(5.0)) * i
        y = 1.0 - 2.0 * (i + 0.5) / n
        s = np.sqrt(np.maximum(0.0, 1.0 - y * y))
        dirs = np.column_stack([s * np.cos(phi), y, s * np.sin(phi)])
        pos = center + radius * dirs
        c0 = self.rng.uniform(0.05, 0.95, size=3)
        c1 = self.rng.uniform(0.05, 0.95, size=3)
        t = (y + 1.0) / 2.0
        self.colors.append(c0 + t[:, None] * (c1 - c0))
        self.positions.append(pos)
        area = 4.0 * math.pi * radius * radius
        self.radii.append(np.full(n, _surface_radius(n, area)))


def generate_scene(seed: int, gaussian_count: int,
                   box: np.ndarray | None = None,
                   clear_x_halfwidth: float = 0.0) -> SyntheticScene:
    """Build a deterministic textured room scene.

    The room is the given box: ground plane at the +y face, four walls, and
    a few boxes and spheres resting on the ground. Exactly `gaussian_count`
    splats are placed, distributed over the surfaces by area.

    Args:
        seed: drives all sampling; same seed gives an identical scene.
        gaussian_count: total number of splats, >= 1.
        box: (2, 3) min/max corners in meters; default spans a 16 x 16 m
            room 1.5 m below the origin with 4 m walls.
        clear_x_halfwidth: when positive, obstacles avoid the band
            |x| < clear_x_halfwidth so a camera path along z stays clear.
    """
    if gaussian_count < 1:
        raise ValueError("gaussian_count must be >= 1")
    box = DEFAULT_BOX.copy() if box is None else np.asarray(box, dtype=np.float64)
    if box.shape != (2, 3) or np.any(box[1] <= box[0]):
        raise ValueError("box must be (2, 3) with max corner > min corner")
    rng = np.random.default_rng(seed)
    lo, hi = box
    sx, sy, sz = hi - lo
    ground_y = hi[1]

    builder = _SceneBuilder(rng)
    surfaces = []  # (kind, area, args)

    surfaces.append(("rect", sx * sz,
                     dict(origin=[lo[0], ground_y, lo[2]],
                          edge_u=[sx, 0, 0], edge_v=[0, 0, sz],
                          texture_cell=0.8)))
    wall_cell = 0.6
    surfaces.append(("rect", sx * sy,
                     dict(origin=[lo[0], lo[1], lo[2]],
                          edge_u=[sx, 0, 0], edge_v=[0, sy, 0],
                          texture_cell=wall_cell)))
    surfaces.append(("rect", sx * sy,
                     dict(origin=[lo[0], lo[1], hi[2]],
                          edge_u=[sx, 0, 0], edge_v=[0, sy, 0],
                          texture_cell=wall_cell)))
    surfaces.append(("rect", sz * sy,
                     dict(origin=[lo[0], lo[1], lo[2]],
                          edge_u=[0, 0, sz], edge_v=[0, sy, 0],
                          texture_cell=wall_cell)))
    surfaces.append(("rect", sz * sy,
                     dict(origin=[hi[0], lo[1], lo[2]],
                          edge_u=[0, 0, sz], edge_v=[0, sy, 0],
                          texture_cell=wall_cell)))

    # Obstacles: boxes get gradient faces, spheres latitude gradients.
    # Rooms too small to fit one are simply left bare.
    inset = 0.18
    n_boxes = 3
    for _ in range(n_boxes):
        w = rng.uniform(0.8, 1.6)
        h = min(rng.uniform(0.8, 2.0), 0.8 * sy)
        d = rng.uniform(0.8, 1.6)
        x_lo, x_hi = lo[0] + inset * sx, hi[0] - inset * sx - w
        z_lo, z_hi = lo[2] + inset * sz, hi[2] - inset * sz - d
        if x_hi <= x_lo or z_hi <= z_lo:
            continue
        cx = rng.uniform(x_lo, x_hi)
        cz = rng.uniform(z_lo, z_hi)
        if clear_x_halfwidth > 0.0:
            placed = False
            for _ in range(40):
                if cx > clear_x_halfwidth or cx + w < -clear_x_halfwidth:
                    placed = True
                    break
                cx = rng.uniform(x_lo, x_hi)
                cz = rng.uniform(z_lo, z_hi)
            if not placed:
                continue
        top = ground_y - h
        faces = [
            dict(origin=[cx, top, cz], edge_u=[w, 0, 0], edge_v=[0, 0, d]),
            dict(origin=[cx, top, cz], edge_u=[w, 0, 0], edge_v=[0, h, 0]),
            dict(origin=[cx, top, cz + d], edge_u=[w, 0, 0], edge_v=[0, h, 0]),
            dict(origin=[cx, top, cz], edge_u=[0, 0, d], edge_v=[0, h, 0]),
            dict(origin=[cx + w, top, cz], edge_u=[0, 0, d], edge_v=[0, h, 0]),
        ]
        for face in faces:
            eu = np.linalg.norm(face["edge_u"])
            ev = np.linalg.norm(face["edge_v"])
            surfaces.append(("rect", eu * ev, dict(**face, texture_cell=None)))

    n_spheres = 2
    for _ in range(n_spheres):
        r = min(rng.uniform(0.5, 0.9), 0.4 * sy, 0.2 * sx, 0.2 * sz)
        x_lo, x_hi = lo[0] + inset * sx, hi[0] - inset * sx
        z_lo, z_hi = lo[2] + inset * sz, hi[2] - inset * sz
        if x_hi <= x_lo or z_hi <= z_lo or r <= 0.0:
            continue
        cx = rng.uniform(x_lo, x_hi)
        cz = rng.uniform(z_lo, z_hi)
        if clear_x_halfwidth > 0.0:
            placed = False
            for _ in range(40):
                if cx - r > clear_x_halfwidth or cx + r < -clear_x_halfwidth:
                    placed = True
                    break
                cx = rng.uniform(x_lo, x_hi)
                cz = rng.uniform(z_lo, z_hi)
            if not placed:
                continue
        center = [cx, ground_y - r, cz]
        surfaces.append(("sphere", 4 * math.pi * r * r,
                         dict(center=center, radius=r)))

    counts = _allocate(gaussian_count, np.array([s[1] for s in surfaces]))
    for (kind, _, args), n in zip(surfaces, counts):
        if kind == "rect":
            builder.add_rect(n, **args)
        else:
            builder.add_sphere(n, **args)

    positions = np.concatenate(builder.positions)
    colors = np.clip(np.concatenate(builder.colors), 0.0, 1.0)
    radii = np.concatenate(builder.radii)
    opacities = rng.uniform(0.85, 0.95, size=len(positions))
    positions = np.clip(positions, lo, hi)
    gmap = GaussianMap.from_arrays(positions, colors, opacities, radii)
    return SyntheticScene(gmap=gmap, box=box, seed=seed)


def lidar_frustum_intrinsics(rays_per_scan: int) -> CameraIntrinsics:
    """Virtual pinhole whose pixel grid spans the LiDAR frustum.

    About `rays_per_scan` pixels, aspect chosen so horizontal coverage is
    70 degrees and vertical 77 degrees with square pixels.
    """
    if rays_per_scan < 1:
        raise ValueError("rays_per_scan must be >= 1")
    tan_h = math.tan(math.radians(LIDAR_FOV_H_DEG / 2.0))
    tan_v = math.tan(math.radians(LIDAR_FOV_V_DEG / 2.0))
    aspect = tan_h / tan_v
    width = max(1, int(round(math.sqrt(rays_per_scan * aspect))))
    height = max(1, int(round(width / aspect)))
    fx = width / (2.0 * tan_h)
    fy = height / (2.0 * tan_v)
    return CameraIntrinsics(fx=fx, fy=fy, cx=(width - 1) / 2.0,
                            cy=(height - 1) / 2.0, width=width, height=height)


def synth_scan(
    scene: SyntheticScene,
    lidar_pose: SE3Pose,
    rays_per_scan: int,
    seed: int,
    range_noise_sigma: float = DEFAULT_RANGE_NOISE,
    silhouette_min: float = SCAN_SILHOUETTE_MIN,
) -> PointCloud:
    """Simulate one frustum-limited scan; points in the sensor frame.

    One ray per pixel of a virtual depth render covering the 70x77 degree
    forward frustum. Each call shifts the whole ray grid by a seeded
    sub-pixel offset, so consecutive scans sample different directions
    (non-repetitive pattern). Rays whose rendered silhouette stays below
    `silhouette_min` miss all surfaces and are dropped. Depth is read as
    silhouette-normalized expected depth; optional Gaussian range noise is
    applied along each ray.
    """
    rng = np.random.default_rng(seed)
    base = lidar_frustum_intrinsics(rays_per_scan)
    du, dv = rng.uniform(-0.5, 0.5, size=2)
    K = CameraIntrinsics(fx=base.fx, fy=base.fy, cx=base.cx + du,
                         cy=base.cy + dv, width=base.width, height=base.height)
    frame = render(scene.gmap, K, lidar_pose, transmittance_floor=1e-4)
    valid = frame.silhouette > silhouette_min
    if not np.any(valid):
        return PointCloud(np.zeros((0, 3)))
    vs, us = np.nonzero(valid)
    depth = frame.depth[vs, us] / frame.silhouette[vs, us]
    x = (us - K.cx) / K.fx * depth
    y = (vs - K.cy) / K.fy * depth
    points = np.column_stack([x, y, depth])
    if range_noise_sigma > 0.0:
        ranges = np.linalg.norm(points, axis=1)
        noise = rng.normal(0.0, range_noise_sigma, size=len(points))
        points *= ((ranges + noise) / ranges)[:, None]
    return PointCloud(points)


def synth_image(scene: SyntheticScene, camera_pose: SE3Pose,
                intrinsics: CameraIntrinsics) -> np.ndarray:
    """Ground-truth color render at a camera pose; deterministic."""
    return render(scene.gmap, intrinsics, camera_pose).color


def arc_trajectory(
    n_frames: int,
    step: float = 0.2,
    yaw_step_deg: float | Sequence[float] = 1.2,
    start_pose: SE3Pose | None = None,
    dt: float = 0.1,
    lidar_to_camera: SE3Pose | None = None,
    ramp_frames: int = 0,
) -> TrajectorySpec:
    """Forward motion along a gentle arc: yaw, then advance, each frame.

    `yaw_step_deg` is a scalar or a per-step sequence of length
    `n_frames - 1`; its sign sets the turn direction, so a sign flip
    halfway gives an S-curve. `ramp_frames > 0` scales the first steps
    linearly up to full speed, like a vehicle pulling away from rest.
    Path length is `step` times the sum of the per-step scale factors,
    which is `step * (n_frames - 1)` without a ramp. The default
    extrinsic is identity (camera and LiDAR co-located, frusta aligned).
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    n_steps = max(n_frames - 1, 0)
    yaw_steps = np.broadcast_to(
        np.asarray(yaw_step_deg, dtype=np.float64), (n_steps,))
    factors = np.ones(n_steps)
    if ramp_frames > 0:
        factors = np.minimum(1.0, (np.arange(n_steps) + 1.0) / ramp_frames)
    pose = SE3Pose.identity() if start_pose is None else start_pose
    extr = SE3Pose.identity() if lidar_to_camera is None else lidar_to_camera
    poses = [pose]
    for k in range(n_steps):
        yaw = SE3Pose.from_matrix(
            rotation_about_axis(np.array([0.0, -1.0, 0.0]),
                                math.radians(yaw_steps[k] * factors[k])),
            np.zeros(3))
        advance = SE3Pose(quaternion=np.array([0.0, 0.0, 0.0, 1.0]),
                          translation=np.array([0.0, 0.0, step * factors[k]]))
        pose = compose(pose, compose(yaw, advance))
        poses.append(pose)
    times = dt * np.arange(n_frames, dtype=np.float64)
    return TrajectorySpec(timestamps=times, lidar_poses=tuple(poses),
                          lidar_to_camera=extr)


def camera_frustum_intrinsics(width: int, height: int) -> CameraIntrinsics:
    """Pinhole camera whose image spans the LiDAR frustum.

    A camera that sees everything the LiDAR hits keeps the photometric
    map complete wherever scans need registering, so simulated rigs
    default to this matched geometry.
    """
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be >= 1")
    tan_h = math.tan(math.radians(LIDAR_FOV_H_DEG / 2.0))
    tan_v = math.tan(math.radians(LIDAR_FOV_V_DEG / 2.0))
    return CameraIntrinsics(fx=width / (2.0 * tan_h),
                            fy=height / (2.0 * tan_v),
                            cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                            width=width, height=height)


CORRIDOR_BOX = np.array([[-4.0, -2.0, -2.0], [4.0, 1.5, 12.0]])
CORRIDOR_HALFWIDTH = 1.2


def corridor_scene(seed: int = 3,
                   gaussian_count: int = 6000) -> SyntheticScene:
    """Textured room with an obstacle-free strip along its long axis.

    Clutter sits against the side walls, leaving the middle clear so a
    camera path down the room never brushes an obstacle while near-field
    structure stays in view.
    """
    return generate_scene(seed, gaussian_count, box=CORRIDOR_BOX,
                          clear_x_halfwidth=CORRIDOR_HALFWIDTH)


def corridor_trajectory(n_frames: int, path_length: float = 10.0,
                        yaw_step_deg: float = 0.6,
                        ramp_frames: int = 10,
                        dt: float = 0.1) -> TrajectorySpec:
    """S-curve drive down the corridor: ramp up from rest, turn one way,
    then the other, staying inside the obstacle-free strip."""
    n_steps = max(n_frames - 1, 0)
    yaw = np.where(np.arange(n_steps) < n_steps // 2,
                   yaw_step_deg, -yaw_step_deg)
    factors = np.ones(n_steps)
    if ramp_frames > 0:
        factors = np.minimum(1.0, (np.arange(n_steps) + 1.0) / ramp_frames)
    step = path_length / factors.sum() if n_steps else 0.0
    return arc_trajectory(n_frames, step=step, yaw_step_deg=yaw,
                          ramp_frames=ramp_frames, dt=dt)


def export_corridor_sequence(
    out_dir: str,
    n_frames: int = 50,
    scene_seed: int = 3,
    gaussian_count: int = 6000,
    rays_per_scan: int = 24000,
    image_width: int = 80,
    image_height: int = 90,
    path_length: float = 10.0,
    range_noise_sigma: float = 0.0,
    seed: int = 0,
) -> None:
    """Simulate a drive through the corridor room and write the dataset.

    This is the standard closed-loop rig: matched camera/LiDAR frusta,
    dense scans, and a ramped S-curve path with ground truth.
    """
    scene = corridor_scene(scene_seed, gaussian_count)
    trajectory = corridor_trajectory(n_frames, path_length)
    intrinsics = camera_frustum_intrinsics(image_width, image_height)
    export_dataset(scene, trajectory, intrinsics, out_dir,
                   rays_per_scan=rays_per_scan, seed=seed,
                   range_noise_sigma=range_noise_sigma)


def export_dataset(
    scene: SyntheticScene,
    trajectory: TrajectorySpec,
    intrinsics: CameraIntrinsics,
    out_dir: str,
    rays_per_scan: int = 3000,
    seed: int = 0,
    range_noise_sigma: float = 0.0,
    write_groundtruth: bool = True,
) -> None:
    """Write a simulated sequence in the on-disk dataset layout.

    Per-frame scan seeds derive from `seed` and the frame index, so the
    whole dataset is a deterministic function of (scene, trajectory, seed).
    """
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "scans"), exist_ok=True)
    camera_poses = []
    for i in range(len(trajectory)):
        cam_pose = trajectory.camera_pose(i)
        camera_poses.append(cam_pose)
        image = synth_image(scene, cam_pose, intrinsics)
        dataset_io.save_image(
            os.path.join(out_dir, "frames", f"{i:06d}.png"), image)
        scan_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        scan = synth_scan(scene, trajectory.lidar_poses[i], rays_per_scan,
                          scan_seed, range_noise_sigma=range_noise_sigma)
        dataset_io.save_scan_ply(
            os.path.join(out_dir, "scans", f"{i:06d}.ply"), scan.points)
    dataset_io.save_times(os.path.join(out_dir, "times.txt"),
                          trajectory.timestamps)
    dataset_io.save_calib(os.path.join(out_dir, "calib.txt"), intrinsics,
                          trajectory.lidar_to_camera)
    if write_groundtruth:
        dataset_io.save_trajectory_tum(
            os.path.join(out_dir, "groundtruth.txt"),
            trajectory.timestamps, camera_poses)

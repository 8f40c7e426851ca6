"""Dataset directory layout, image/scan/trajectory file formats.

A dataset directory holds a camera+LiDAR sequence:

    frames/000000.png   8-bit RGB images (PPM accepted as an alternative)
    scans/000000.ply    binary little-endian PLY, float32 x/y/z, sensor frame
    times.txt           one timestamp per line, seconds
    calib.txt           line 1: fx fy cx cy
                        line 2: 12 row-major floats of the 3x4 lidar-to-camera
                                transform (rotation | translation)
    groundtruth.txt     optional, TUM format, camera pose in world

Trajectories use the TUM format: `timestamp tx ty tz qx qy qz qw`, one line
per frame, quaternion scalar-last.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, PointCloud, SE3Pose

IMAGE_EXTENSIONS = (".png", ".ppm")


class DatasetError(ValueError):
    """A dataset directory or one of its files is malformed."""


def save_image(path: str, image: np.ndarray) -> None:
    """Write a float RGB image in [0, 1] as an 8-bit PNG or PPM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_image(path: str) -> np.ndarray:
    """Read an 8-bit RGB image as float64 in [0, 1]."""
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return data / 255.0


def save_scan_ply(path: str, points: np.ndarray) -> None:
    """Write an (N, 3) point array as a binary little-endian PLY."""
    points = np.ascontiguousarray(points, dtype="<f4")
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {points.shape}")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(points.tobytes())


def load_scan_ply(path: str) -> np.ndarray:
    """Read a binary little-endian float32 x/y/z PLY as (N, 3) float64."""
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise DatasetError(f"{path}: not a PLY file")
        count = None
        fmt = None
        props = []
        while True:
            line = fh.readline()
            if not line:
                raise DatasetError(f"{path}: unterminated PLY header")
            parts = line.strip().split()
            if not parts:
                continue
            if parts[0] == b"comment":
                continue
            if parts[0] == b"format":
                fmt = parts[1]
            elif parts[0] == b"element":
                if parts[1] != b"vertex":
                    raise DatasetError(f"{path}: unsupported element {parts[1]!r}")
                count = int(parts[2])
            elif parts[0] == b"property":
                props.append((parts[1], parts[2]))
            elif parts[0] == b"end_header":
                break
        if fmt != b"binary_little_endian":
            raise DatasetError(f"{path}: expected binary_little_endian, got {fmt!r}")
        if count is None:
            raise DatasetError(f"{path}: missing vertex element")
        if props != [(b"float", b"x"), (b"float", b"y"), (b"float", b"z")]:
            raise DatasetError(f"{path}: expected float x/y/z properties, got {props}")
        data = fh.read(count * 12)
    if len(data) != count * 12:
        raise DatasetError(f"{path}: truncated vertex data")
    return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(count, 3)


def save_times(path: str, timestamps: np.ndarray) -> None:
    with open(path, "w") as fh:
        for t in np.asarray(timestamps, dtype=np.float64):
            fh.write(f"{t:.6f}\n")


def load_times(path: str) -> np.ndarray:
    times = []
    with open(path) as fh:
        for raw in fh:
            raw = raw.strip()
            if raw:
                times.append(float(raw))
    return np.asarray(times, dtype=np.float64)


def save_calib(path: str, intrinsics: CameraIntrinsics, lidar_to_camera: SE3Pose) -> None:
    mat = lidar_to_camera.as_matrix()[:3, :].reshape(-1)
    with open(path, "w") as fh:
        fh.write(f"{intrinsics.fx:.9f} {intrinsics.fy:.9f} "
                 f"{intrinsics.cx:.9f} {intrinsics.cy:.9f}\n")
        fh.write(" ".join(f"{v:.9f}" for v in mat) + "\n")


def load_calib(path: str) -> tuple[tuple[float, float, float, float], SE3Pose]:
    """Read calib.txt: ((fx, fy, cx, cy), lidar-to-camera transform)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) < 2:
        raise DatasetError(f"{path}: expected 2 lines, got {len(lines)}")
    k = [float(v) for v in lines[0].split()]
    if len(k) != 4:
        raise DatasetError(f"{path}: line 1 must hold fx fy cx cy")
    vals = [float(v) for v in lines[1].split()]
    if len(vals) != 12:
        raise DatasetError(f"{path}: line 2 must hold 12 row-major floats")
    mat = np.asarray(vals).reshape(3, 4)
    return (k[0], k[1], k[2], k[3]), SE3Pose.from_matrix(mat[:, :3], mat[:, 3])


def save_trajectory_tum(path: str, timestamps: np.ndarray,
                        poses: list[SE3Pose]) -> None:
    """Write a TUM trajectory: `timestamp tx ty tz qx qy qz qw` per line."""
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if len(timestamps) != len(poses):
        raise ValueError("timestamp/pose count mismatch")
    with open(path, "w") as fh:
        for t, pose in zip(timestamps, poses):
            tx, ty, tz = pose.translation
            qx, qy, qz, qw = pose.quaternion
            fh.write(f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                     f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n")


def load_trajectory_tum(path: str) -> tuple[np.ndarray, list[SE3Pose]]:
    times = []
    poses = []
    with open(path) as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            vals = [float(v) for v in raw.split()]
            if len(vals) != 8:
                raise DatasetError(f"{path}: expected 8 fields per line")
            times.append(vals[0])
            poses.append(SE3Pose(quaternion=np.asarray(vals[4:8]),
                                 translation=np.asarray(vals[1:4])))
    return np.asarray(times, dtype=np.float64), poses


def _frame_path(directory: str, index: int) -> str:
    for ext in IMAGE_EXTENSIONS:
        path = os.path.join(directory, f"{index:06d}{ext}")
        if os.path.exists(path):
            return path
    raise DatasetError(f"missing frame image {index:06d} in {directory}")


@dataclass
class Dataset:
    """A loaded sequence: calibration plus lazily read per-frame files."""

    root: str
    timestamps: np.ndarray
    intrinsics: CameraIntrinsics
    lidar_to_camera: SE3Pose
    groundtruth: tuple[np.ndarray, list[SE3Pose]] | None

    def __len__(self) -> int:
        return len(self.timestamps)

    def load_image(self, index: int) -> np.ndarray:
        return load_image(_frame_path(os.path.join(self.root, "frames"), index))

    def load_scan(self, index: int) -> PointCloud:
        path = os.path.join(self.root, "scans", f"{index:06d}.ply")
        if not os.path.exists(path):
            raise DatasetError(f"missing scan {path}")
        return PointCloud(load_scan_ply(path))


def load_dataset(root: str) -> Dataset:
    """Validate and open a dataset directory.

    Raises DatasetError with a descriptive message on any layout problem,
    before any frame is processed.
    """
    if not os.path.isdir(root):
        raise DatasetError(f"dataset directory not found: {root}")
    times_path = os.path.join(root, "times.txt")
    calib_path = os.path.join(root, "calib.txt")
    for req in (times_path, calib_path):
        if not os.path.exists(req):
            raise DatasetError(f"missing required file: {req}")
    for sub in ("frames", "scans"):
        if not os.path.isdir(os.path.join(root, sub)):
            raise DatasetError(f"missing required directory: {os.path.join(root, sub)}")
    timestamps = load_times(times_path)
    if len(timestamps) == 0:
        raise DatasetError(f"{times_path}: no timestamps")
    if np.any(np.diff(timestamps) <= 0):
        raise DatasetError(f"{times_path}: timestamps must strictly increase")
    (fx, fy, cx, cy), lidar_to_camera = load_calib(calib_path)
    for i in range(len(timestamps)):
        _frame_path(os.path.join(root, "frames"), i)
        scan = os.path.join(root, "scans", f"{i:06d}.ply")
        if not os.path.exists(scan):
            raise DatasetError(f"missing scan {scan}")
    first = load_image(_frame_path(os.path.join(root, "frames"), 0))
    height, width = first.shape[:2]
    intrinsics = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                                  width=width, height=height)
    gt_path = os.path.join(root, "groundtruth.txt")
    groundtruth = load_trajectory_tum(gt_path) if os.path.exists(gt_path) else None
    if groundtruth is not None and len(groundtruth[0]) == 0:
        groundtruth = None
    return Dataset(root=root, timestamps=timestamps, intrinsics=intrinsics,
                   lidar_to_camera=lidar_to_camera, groundtruth=groundtruth)

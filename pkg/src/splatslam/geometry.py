"""Rigid transforms, quaternion math, and pinhole camera geometry.

Conventions used across the package:
  * Quaternions are scalar-last ``[x, y, z, w]``, Hamilton product, unit norm.
  * ``SE3Pose`` stores rotation + translation mapping points from the pose's
    source frame into its target frame: ``p_out = R @ p_in + t``.
  * Camera frame: +z forward, +x right, +y down. Pixel (0, 0) is the center
    of the top-left pixel.
  * se3 tangent vectors are 6-vectors ordered ``[rotation, translation]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(q))
    if n < _EPS:
        raise ValueError("cannot normalize a near-zero quaternion")
    q = q / n
    # Fix the double-cover sign so equal rotations compare equal more often.
    if q[3] < 0.0:
        q = -q
    return q


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product of two scalar-last quaternions."""
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit scalar-last quaternion."""
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Scalar-last quaternion of a rotation matrix (Shepperd's method)."""
    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    tr = m00 + m11 + m22
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([(m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s, 0.25 * s])
    elif m00 >= m11 and m00 >= m22:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2.0
        q = np.array([0.25 * s, (m01 + m10) / s, (m02 + m20) / s, (m21 - m12) / s])
    elif m11 >= m22:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2.0
        q = np.array([(m01 + m10) / s, 0.25 * s, (m12 + m21) / s, (m02 - m20) / s])
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2.0
        q = np.array([(m02 + m20) / s, (m12 + m21) / s, 0.25 * s, (m10 - m01) / s])
    return _quat_normalize(q)


def quaternion_distance(q1: np.ndarray, q2: np.ndarray) -> float:
    """Distance between unit quaternions, invariant to the double cover."""
    d1 = float(np.linalg.norm(np.asarray(q1) - np.asarray(q2)))
    d2 = float(np.linalg.norm(np.asarray(q1) + np.asarray(q2)))
    return min(d1, d2)


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle in radians of a rotation matrix."""
    c = (np.trace(R) - 1.0) * 0.5
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula: rotation matrix of a rotation vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    K = np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )
    if theta < 1e-8:
        # Second-order series keeps orthogonality to float64 precision here.
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix (inverse of :func:`so3_exp`)."""
    theta = rotation_angle(R)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if theta > np.pi - 1e-6:
        # Near pi the off-diagonal formula degenerates; use the diagonal.
        A = (R + np.eye(3)) * 0.5
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # Fix signs from the largest off-diagonal products.
        i = int(np.argmax(axis))
        axis = axis.copy()
        for j in range(3):
            if j != i and A[i, j] < 0.0:
                axis[j] = -axis[j]
        n = np.linalg.norm(axis)
        if n < _EPS:
            return np.zeros(3)
        return axis / n * theta
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v * (theta / (2.0 * np.sin(theta)))


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    a = (1.0 - np.cos(theta)) / t2
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * K + b * (K @ K)


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform ``p_out = R @ p_in + t``.

    Attributes:
        quaternion: unit scalar-last ``[x, y, z, w]``, float64, shape (4,).
        translation: float64, shape (3,).
    """

    quaternion: np.ndarray
    translation: np.ndarray
    _matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        q = _quat_normalize(np.asarray(self.quaternion, dtype=np.float64).reshape(4))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite translation")
        q.setflags(write=False)
        t.setflags(write=False)
        R = quat_to_matrix(q)
        R.setflags(write=False)
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "_matrix", R)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @staticmethod
    def from_matrix(R: np.ndarray, t: np.ndarray) -> "SE3Pose":
        return SE3Pose(matrix_to_quat(np.asarray(R, dtype=np.float64)), t)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return self._matrix

    def as_matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        T = np.eye(4)
        T[:3, :3] = self._matrix
        T[:3, 3] = self.translation
        return T


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Transform composition: ``compose(a, b)`` applies ``b`` first, then ``a``."""
    q = quat_multiply(a.quaternion, b.quaternion)
    t = a.rotation_matrix @ b.translation + a.translation
    return SE3Pose(q, t)


def invert(p: SE3Pose) -> SE3Pose:
    q = np.array([-p.quaternion[0], -p.quaternion[1], -p.quaternion[2], p.quaternion[3]])
    t = -(p.rotation_matrix.T @ p.translation)
    return SE3Pose(q, t)


def transform_points(pose: SE3Pose, points: np.ndarray) -> np.ndarray:
    """Apply a pose to one point (3,) or a point array (N, 3)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        return pose.rotation_matrix @ pts + pose.translation
    return pts @ pose.rotation_matrix.T + pose.translation


def se3_exp(xi: np.ndarray) -> SE3Pose:
    """Exponential map of a twist ``[rotation, translation]``."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    w = xi[:3]
    R = so3_exp(w)
    t = _so3_left_jacobian(w) @ xi[3:]
    return SE3Pose.from_matrix(R, t)


def se3_log(pose: SE3Pose) -> np.ndarray:
    """Twist ``[rotation, translation]`` such that ``se3_exp`` reproduces ``pose``."""
    w = so3_log(pose.rotation_matrix)
    J = _so3_left_jacobian(w)
    rho = np.linalg.solve(J, pose.translation)
    return np.concatenate([w, rho])


def apply_pose_step(camera_pose_world: SE3Pose, xi: np.ndarray) -> SE3Pose:
    """Retract a 6-vector step onto a camera-in-world pose.

    The step lives in the tangent of the world-to-camera transform (left
    perturbation), matching the pose gradients produced by the renderer:
    ``E' = se3_exp(xi) @ E`` with ``E = invert(camera_pose_world)``.
    """
    E = invert(camera_pose_world)
    E_new = compose(se3_exp(xi), E)
    return invert(E_new)


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix about an arbitrary (non-zero) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < _EPS:
        raise ValueError("rotation axis must be non-zero")
    return so3_exp(axis / n * angle)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class PointCloud:
    """Finite 3D points, shape (N, 3) float64. N may be zero."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def project_point(
    intrinsics: CameraIntrinsics,
    world_to_camera: SE3Pose,
    point_world: np.ndarray,
    near_plane: float = 0.01,
):
    """Project one world point; returns ``(pixel (2,), depth)`` or ``None``.

    ``None`` signals the point is behind (or too close to) the camera,
    i.e. its camera-frame depth is <= ``near_plane``.
    """
    q = transform_points(world_to_camera, np.asarray(point_world, dtype=np.float64))
    d = float(q[2])
    if d <= near_plane:
        return None
    u = intrinsics.fx * q[0] / d + intrinsics.cx
    v = intrinsics.fy * q[1] / d + intrinsics.cy
    return np.array([u, v]), d


def project_points(
    intrinsics: CameraIntrinsics,
    world_to_camera: SE3Pose,
    points_world: np.ndarray,
    near_plane: float = 0.01,
):
    """Vectorized projection.

    Returns:
        pixels (N, 2), depths (N,), valid (N,) bool. Entries with
        ``valid=False`` (depth <= near_plane) hold unspecified pixel values.
    """
    q = transform_points(world_to_camera, points_world)
    depths = q[:, 2]
    valid = depths > near_plane
    safe = np.where(valid, depths, 1.0)
    pixels = np.empty((q.shape[0], 2))
    pixels[:, 0] = intrinsics.fx * q[:, 0] / safe + intrinsics.cx
    pixels[:, 1] = intrinsics.fy * q[:, 1] / safe + intrinsics.cy
    return pixels, depths, valid


def back_project(intrinsics: CameraIntrinsics, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Camera-frame point of a pixel at a given (positive) depth."""
    if depth <= 0.0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    return np.array(
        [
            (u - intrinsics.cx) / intrinsics.fx * depth,
            (v - intrinsics.cy) / intrinsics.fy * depth,
            depth,
        ]
    )

"""The Gaussian map: a growable structure-of-arrays of isotropic splats.

Each splat has a world position, an RGB color in [0, 1], an opacity in
[0, 1], an isotropic radius (meters, > 0), and an origin tag recording
whether it came from a LiDAR point or from densification cloning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, PointCloud

ORIGIN_LIDAR = 0
ORIGIN_DENSIFIED = 1

_PLY_HEADER = """ply
format ascii 1.0
element vertex {count}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
property float opacity
property float radius
property uchar origin
end_header
"""


@dataclass(frozen=True)
class Gaussian:
    """One splat, copied out of the map for inspection."""

    position: np.ndarray
    color: np.ndarray
    opacity: float
    radius: float
    origin: int


class GaussianMap:
    """Structure-of-arrays splat storage plus densification statistics.

    Positional-gradient statistics (`grad_vec_sum`, `grad_norm_sum`,
    `grad_count`) are accumulated by the renderer's backward pass during
    map optimization and consumed/reset by :meth:`densify`.
    """

    def __init__(self):
        self.positions = np.zeros((0, 3), dtype=np.float64)
        self.colors = np.zeros((0, 3), dtype=np.float64)
        self.opacities = np.zeros(0, dtype=np.float64)
        self.radii = np.zeros(0, dtype=np.float64)
        self.origins = np.zeros(0, dtype=np.uint8)
        self.grad_vec_sum = np.zeros((0, 3), dtype=np.float64)
        self.grad_norm_sum = np.zeros(0, dtype=np.float64)
        self.grad_count = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def from_arrays(
        cls,
        positions: np.ndarray,
        colors: np.ndarray,
        opacities: np.ndarray,
        radii: np.ndarray,
        origins: np.ndarray | None = None,
    ) -> "GaussianMap":
        m = cls()
        if origins is None:
            origins = np.full(len(positions), ORIGIN_LIDAR, dtype=np.uint8)
        m._append(positions, colors, opacities, radii, origins)
        return m

    def get(self, index: int) -> Gaussian:
        return Gaussian(
            position=self.positions[index].copy(),
            color=self.colors[index].copy(),
            opacity=float(self.opacities[index]),
            radius=float(self.radii[index]),
            origin=int(self.origins[index]),
        )

    def copy(self) -> "GaussianMap":
        m = GaussianMap()
        m.positions = self.positions.copy()
        m.colors = self.colors.copy()
        m.opacities = self.opacities.copy()
        m.radii = self.radii.copy()
        m.origins = self.origins.copy()
        m.grad_vec_sum = self.grad_vec_sum.copy()
        m.grad_norm_sum = self.grad_norm_sum.copy()
        m.grad_count = self.grad_count.copy()
        return m

    def _append(self, positions, colors, opacities, radii, origins):
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
        opacities = np.atleast_1d(np.asarray(opacities, dtype=np.float64))
        radii = np.atleast_1d(np.asarray(radii, dtype=np.float64))
        origins = np.atleast_1d(np.asarray(origins, dtype=np.uint8))
        n = positions.shape[0]
        if not (colors.shape[0] == opacities.shape[0] == radii.shape[0] == origins.shape[0] == n):
            raise ValueError("attribute arrays disagree on length")
        if not np.all(np.isfinite(positions)):
            raise ValueError("non-finite positions")
        if np.any(radii <= 0.0):
            raise ValueError("radii must be positive")
        if np.any((opacities < 0.0) | (opacities > 1.0)):
            raise ValueError("opacities must lie in [0, 1]")
        if np.any((colors < 0.0) | (colors > 1.0)):
            raise ValueError("colors must lie in [0, 1]")
        self.positions = np.concatenate([self.positions, positions])
        self.colors = np.concatenate([self.colors, colors])
        self.opacities = np.concatenate([self.opacities, opacities])
        self.radii = np.concatenate([self.radii, radii])
        self.origins = np.concatenate([self.origins, origins])
        self.grad_vec_sum = np.concatenate([self.grad_vec_sum, np.zeros((n, 3))])
        self.grad_norm_sum = np.concatenate([self.grad_norm_sum, np.zeros(n)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(n, dtype=np.int64)])
        return n

    def insert_from_scan(
        self,
        points_world: PointCloud,
        colors: np.ndarray,
        depths: np.ndarray,
        intrinsics: CameraIntrinsics,
    ) -> int:
        """Insert one splat per scan point.

        Args:
            points_world: scan points already transformed into the world frame.
            colors: per-point RGB in [0, 1], shape (N, 3), sampled from the image.
            depths: per-point camera-frame depth (meters), shape (N,).
            intrinsics: camera used to derive the initial radius.

        Returns:
            Number of splats inserted.

        The initial radius is ``depth / mean_focal``, i.e. roughly one pixel's
        footprint at the point's depth; initial opacity is 0.5.
        """
        pts = points_world.points
        colors = np.asarray(colors, dtype=np.float64)
        depths = np.asarray(depths, dtype=np.float64)
        if colors.shape != (len(pts), 3) or depths.shape != (len(pts),):
            raise ValueError("colors/depths length does not match point count")
        if np.any(depths <= 0.0):
            raise ValueError("depths must be positive")
        radii = depths / intrinsics.mean_focal
        return self._append(
            pts,
            np.clip(colors, 0.0, 1.0),
            np.full(len(pts), 0.5),
            radii,
            np.full(len(pts), ORIGIN_LIDAR, dtype=np.uint8),
        )

    def extract_lidar_points(self) -> PointCloud:
        """Positions of LiDAR-originated splats (densified clones excluded)."""
        return PointCloud(self.positions[self.origins == ORIGIN_LIDAR].copy())

    def _keep(self, mask: np.ndarray):
        self.positions = self.positions[mask]
        self.colors = self.colors[mask]
        self.opacities = self.opacities[mask]
        self.radii = self.radii[mask]
        self.origins = self.origins[mask]
        self.grad_vec_sum = self.grad_vec_sum[mask]
        self.grad_norm_sum = self.grad_norm_sum[mask]
        self.grad_count = self.grad_count[mask]

    def prune(self, opacity_min: float = 0.005, radius_max: float = 1.0) -> int:
        """Drop near-transparent or oversized splats; returns removed count."""
        drop = (self.opacities < opacity_min) | (self.radii > radius_max)
        removed = int(np.count_nonzero(drop))
        if removed:
            self._keep(~drop)
        return removed

    def densify(self, grad_threshold: float) -> int:
        """Clone splats whose mean accumulated positional gradient is large.

        A clone is offset from its source along the accumulated gradient
        direction by the source radius and starts at half the source radius,
        tagged ``ORIGIN_DENSIFIED``. All gradient accumulators are reset.

        Returns:
            Number of clones added.
        """
        count = np.maximum(self.grad_count, 1)
        mean_norm = self.grad_norm_sum / count
        sel = (mean_norm > grad_threshold) & (self.grad_count > 0)
        added = int(np.count_nonzero(sel))
        if added:
            vec = self.grad_vec_sum[sel]
            norm = np.linalg.norm(vec, axis=1, keepdims=True)
            direction = np.divide(vec, norm, out=np.zeros_like(vec), where=norm > 1e-12)
            src_radii = self.radii[sel]
            self._append(
                self.positions[sel] + direction * src_radii[:, None],
                self.colors[sel],
                self.opacities[sel],
                src_radii * 0.5,
                np.full(added, ORIGIN_DENSIFIED, dtype=np.uint8),
            )
        self.grad_vec_sum[:] = 0.0
        self.grad_norm_sum[:] = 0.0
        self.grad_count[:] = 0
        return added

    def reset_gradient_stats(self):
        self.grad_vec_sum[:] = 0.0
        self.grad_norm_sum[:] = 0.0
        self.grad_count[:] = 0

    def save_ply(self, path):
        """Write the map as ASCII PLY (colors quantized to 8 bits)."""
        n = len(self)
        rgb = np.clip(np.rint(self.colors * 255.0), 0, 255).astype(np.uint8)
        with open(path, "w") as fh:
            fh.write(_PLY_HEADER.format(count=n))
            for i in range(n):
                p = self.positions[i]
                fh.write(
                    f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g} "
                    f"{rgb[i, 0]} {rgb[i, 1]} {rgb[i, 2]} "
                    f"{self.opacities[i]:.8g} {self.radii[i]:.8g} {self.origins[i]}\n"
                )

    @classmethod
    def load_ply(cls, path) -> "GaussianMap":
        """Read a map written by :meth:`save_ply`."""
        with open(path, "r") as fh:
            line = fh.readline().strip()
            if line != "ply":
                raise ValueError(f"{path}: not a PLY file")
            count = None
            props = []
            while True:
                line = fh.readline()
                if not line:
                    raise ValueError(f"{path}: truncated PLY header")
                line = line.strip()
                if line.startswith("format"):
                    if "ascii" not in line:
                        raise ValueError(f"{path}: expected ASCII PLY")
                elif line.startswith("element vertex"):
                    count = int(line.split()[-1])
                elif line.startswith("property"):
                    props.append(line.split()[-1])
                elif line == "end_header":
                    break
            expected = ["x", "y", "z", "red", "green", "blue", "opacity", "radius", "origin"]
            if props != expected:
                raise ValueError(f"{path}: unexpected property list {props}")
            if count is None:
                raise ValueError(f"{path}: missing vertex count")
            if count == 0:
                return cls()
            data = np.loadtxt(fh, dtype=np.float64, max_rows=count, ndmin=2)
        if data.shape != (count, 9):
            raise ValueError(f"{path}: expected {count} vertex rows, got {data.shape}")
        m = cls()
        if count:
            m._append(
                data[:, 0:3],
                data[:, 3:6] / 255.0,
                data[:, 6],
                data[:, 7],
                data[:, 8].astype(np.uint8),
            )
        return m

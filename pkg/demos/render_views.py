"""Render color, depth, and silhouette images of a synthetic room.

Builds a deterministic textured scene, renders it from a few poses along
a short arc, and writes the images side by side so the splatting output
can be inspected directly.

Usage: python demos/render_views.py [--out demo_renders]
"""

import argparse
import os

import numpy as np

from splatslam.dataset import save_image
from splatslam.renderer import render
from splatslam.simulator import (
    arc_trajectory,
    camera_frustum_intrinsics,
    corridor_scene,
)


def colorize_depth(depth, silhouette):
    """Map depth to a gray ramp, masking uncovered pixels to black."""
    covered = silhouette > 0.5
    if not covered.any():
        return np.zeros(depth.shape + (3,))
    d = np.where(covered, depth, np.nan)
    lo, hi = np.nanmin(d), np.nanmax(d)
    ramp = np.zeros_like(depth)
    if hi > lo:
        ramp = np.where(covered, 1.0 - (depth - lo) / (hi - lo), 0.0)
    return np.repeat(ramp[..., None], 3, axis=2)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="demo_renders")
    args = parser.parse_args()

    scene = corridor_scene(seed=3, gaussian_count=6000)
    intrinsics = camera_frustum_intrinsics(160, 180)
    trajectory = arc_trajectory(4, step=1.5, yaw_step_deg=4.0)

    os.makedirs(args.out, exist_ok=True)
    for i in range(len(trajectory)):
        pose = trajectory.camera_pose(i)
        frame = render(scene.gmap, intrinsics, pose)
        depth_vis = colorize_depth(frame.depth, frame.silhouette)
        sil_vis = np.repeat(frame.silhouette[..., None], 3, axis=2)
        strip = np.concatenate([frame.color, depth_vis, sil_vis], axis=1)
        path = os.path.join(args.out, f"view_{i}.png")
        save_image(path, strip)
        covered = float(np.mean(frame.silhouette > 0.5)) * 100.0
        print(f"{path}: {covered:.0f}% of pixels covered, "
              f"depth {frame.depth[frame.silhouette > 0.5].min():.1f} to "
              f"{frame.depth[frame.silhouette > 0.5].max():.1f} m")


if __name__ == "__main__":
    main()

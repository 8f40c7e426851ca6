"""Differentiable splat renderer: color, depth, and silhouette images.

A splat with world position mu, opacity o, and radius r projects to a 2D
isotropic Gaussian at pixel center ``(fx qx/d + cx, fy qy/d + cy)`` with
screen radius ``f r / d`` (f the mean focal length, q the camera-frame
position, d its depth). Per pixel p the contribution of splat i is

    f_i(p) = o_i exp(-|p - mu_i^p|^2 / (2 (r_i^p)^2))

composited front to back in ascending camera depth:

    w_i = f_i T_i,  T_i = prod_{j<i} (1 - f_j)
    color(p) = sum w_i c_i    depth(p) = sum w_i d_i    sil(p) = sum w_i

with three hard rules applied identically by the tiled path and the numpy
reference path: f_i = 0 beyond 3 r_i^p from the center, contributions
below 1/255 are skipped, and f_i is clamped to 0.9999. The depth channel is
the raw weighted sum (it under-reports absolute depth where sil < 1; divide
by sil for metric depth).

The fast mode stops compositing a pixel once remaining transmittance drops
below ``transmittance_floor``; the default floor of 0 gives the exact sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._kernels import CUTOFF_SIGMAS, F_MAX, F_MIN, TILE
from .gaussian_map import GaussianMap
from .geometry import CameraIntrinsics, SE3Pose, invert

DEFAULT_NEAR_PLANE = 0.01


@dataclass
class _ForwardCache:
    """Projection state reused by the backward pass."""

    intrinsics: CameraIntrinsics
    world_to_camera: SE3Pose
    t_floor: float
    map_size: int
    valid_idx: np.ndarray  # global indices of projected splats
    q: np.ndarray  # camera-frame positions of valid splats
    mu_p: np.ndarray
    r_p: np.ndarray
    tile_ptr: np.ndarray
    tile_entries: np.ndarray
    tiles_x: int
    tiles_y: int


@dataclass
class RenderedFrame:
    """Forward-pass outputs.

    ``support_signature`` hashes the exact sequence of per-pixel splat
    contributions (including clamp flags); two renders hit the same
    discrete support iff their signatures match. The reference renderer
    does not compute it (always 0).
    """

    color: np.ndarray
    depth: np.ndarray
    silhouette: np.ndarray
    support_signature: int = 0
    _cache: _ForwardCache | None = field(default=None, repr=False)


@dataclass
class RenderGradients:
    """dL/d(map attributes) and dL/d(pose), aligned with map indices.

    ``pose`` is a 6-vector ``[rotation, translation]`` in the left tangent
    of the world-to-camera transform; step the camera with
    :func:`splatslam.geometry.apply_pose_step` (negated for descent).
    """

    positions: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    radii: np.ndarray
    pose: np.ndarray


def _project_map(gmap, intrinsics, world_to_camera, near_plane):
    """Project all splats; returns (valid_idx, q, mu_p, r_p) depth-sorted."""
    R = world_to_camera.rotation_matrix
    t = world_to_camera.translation
    q_all = gmap.positions @ R.T + t
    valid = q_all[:, 2] > near_plane
    valid_idx = np.nonzero(valid)[0]
    q = q_all[valid_idx]
    # Ascending depth; stable so equal depths keep insertion order.
    order = np.argsort(q[:, 2], kind="stable")
    valid_idx = valid_idx[order]
    q = q[order]
    d = q[:, 2]
    mu_p = np.empty((q.shape[0], 2))
    mu_p[:, 0] = intrinsics.fx * q[:, 0] / d + intrinsics.cx
    mu_p[:, 1] = intrinsics.fy * q[:, 1] / d + intrinsics.cy
    r_p = intrinsics.mean_focal * gmap.radii[valid_idx] / d
    return valid_idx, q, mu_p, r_p


def render(
    gmap: GaussianMap,
    intrinsics: CameraIntrinsics,
    camera_pose_world: SE3Pose,
    transmittance_floor: float = 0.0,
    near_plane: float = DEFAULT_NEAR_PLANE,
) -> RenderedFrame:
    """Render the map from a camera-in-world pose (tiled path).

    Args:
        gmap: the splat map.
        intrinsics: pinhole intrinsics fixing the output size.
        camera_pose_world: camera-to-world transform of the viewpoint.
        transmittance_floor: stop compositing a pixel below this remaining
            transmittance; 0 disables early termination (exact mode).
        near_plane: splats at camera depth <= this are culled.

    Returns:
        A RenderedFrame with float64 color (H, W, 3), depth (H, W),
        silhouette (H, W), and the support signature.
    """
    H, W = intrinsics.height, intrinsics.width
    world_to_camera = invert(camera_pose_world)
    out_color = np.zeros((H, W, 3))
    out_depth = np.zeros((H, W))
    out_sil = np.zeros((H, W))
    tiles_x = (W + TILE - 1) // TILE
    tiles_y = (H + TILE - 1) // TILE
    valid_idx, q, mu_p, r_p = _project_map(gmap, intrinsics, world_to_camera, near_plane)
    if valid_idx.size == 0:
        cache = _ForwardCache(
            intrinsics, world_to_camera, transmittance_floor, len(gmap),
            valid_idx, q, mu_p, r_p,
            np.zeros(tiles_x * tiles_y + 1, dtype=np.int64),
            np.zeros(0, dtype=np.int64), tiles_x, tiles_y,
        )
        return RenderedFrame(out_color, out_depth, out_sil, 0, cache)
    rects = _kernels.tile_rects(mu_p, r_p, W, H, tiles_x, tiles_y)
    local_order = np.arange(valid_idx.size, dtype=np.int64)
    ptr, entries = _kernels.build_tile_lists(local_order, rects, tiles_x, tiles_y)
    sig = _kernels.composite_forward(
        ptr, entries, mu_p, r_p,
        gmap.opacities[valid_idx], gmap.colors[valid_idx], q[:, 2],
        W, H, tiles_x, tiles_y, transmittance_floor,
        out_color, out_depth, out_sil,
    )
    cache = _ForwardCache(
        intrinsics, world_to_camera, transmittance_floor, len(gmap),
        valid_idx, q, mu_p, r_p, ptr, entries, tiles_x, tiles_y,
    )
    return RenderedFrame(out_color, out_depth, out_sil, int(sig), cache)


def render_reference(
    gmap: GaussianMap,
    intrinsics: CameraIntrinsics,
    camera_pose_world: SE3Pose,
    near_plane: float = DEFAULT_NEAR_PLANE,
) -> RenderedFrame:
    """Naive full-matrix renderer used as the correctness oracle.

    Composites every splat against every pixel with dense numpy ops, no
    tiling and no early termination. Same math rules as :func:`render`;
    kept deliberately independent of the tiled implementation.
    """
    H, W = intrinsics.height, intrinsics.width
    world_to_camera = invert(camera_pose_world)
    R = world_to_camera.rotation_matrix
    t = world_to_camera.translation
    q_all = gmap.positions @ R.T + t
    keep = q_all[:, 2] > near_plane
    q = q_all[keep]
    if q.shape[0] == 0:
        return RenderedFrame(np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)))
    order = np.argsort(q[:, 2], kind="stable")
    q = q[order]
    colors = gmap.colors[keep][order]
    opac = gmap.opacities[keep][order]
    radii = gmap.radii[keep][order]
    d = q[:, 2]
    ux = intrinsics.fx * q[:, 0] / d + intrinsics.cx
    uy = intrinsics.fy * q[:, 1] / d + intrinsics.cy
    rp = intrinsics.mean_focal * radii / d

    us, vs = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    # dist2[p, i] for every pixel p (flattened) and splat i.
    dx = us.reshape(-1, 1) - ux.reshape(1, -1)
    dy = vs.reshape(-1, 1) - uy.reshape(1, -1)
    dist2 = dx * dx + dy * dy
    f = opac.reshape(1, -1) * np.exp(-0.5 * dist2 / (rp * rp).reshape(1, -1))
    f[dist2 > (CUTOFF_SIGMAS * rp).reshape(1, -1) ** 2] = 0.0
    f[f < F_MIN] = 0.0
    np.minimum(f, F_MAX, out=f)

    one_minus = 1.0 - f
    trans = np.cumprod(one_minus, axis=1)
    trans = np.concatenate([np.ones((trans.shape[0], 1)), trans[:, :-1]], axis=1)
    w = f * trans
    color = (w @ colors).reshape(H, W, 3)
    depth = (w @ d).reshape(H, W)
    sil = w.sum(axis=1).reshape(H, W)
    return RenderedFrame(color, depth, sil)


def render_backward(
    gmap: GaussianMap,
    rendered: RenderedFrame,
    d_color: np.ndarray | None = None,
    d_depth: np.ndarray | None = None,
    d_silhouette: np.ndarray | None = None,
    accumulate_stats: bool = False,
) -> RenderGradients:
    """Backpropagate image-space loss gradients through a forward render.

    Args:
        gmap: the same map the forward pass rendered (must be unchanged).
        rendered: output of :func:`render` (the reference path keeps no
            cache and cannot be differentiated).
        d_color/d_depth/d_silhouette: upstream dL/d(image); None means zero.
        accumulate_stats: when True, add per-splat positional gradient
            norms into the map's densification accumulators.

    Returns:
        RenderGradients sized to the full map (zeros for splats that did
        not contribute).
    """
    cache = rendered._cache
    if cache is None:
        raise ValueError("rendered frame carries no backward cache")
    if cache.map_size != len(gmap):
        raise ValueError("map changed size since the forward pass")
    K = cache.intrinsics
    H, W = K.height, K.width
    if d_color is None:
        d_color = np.zeros((H, W, 3))
    if d_depth is None:
        d_depth = np.zeros((H, W))
    if d_silhouette is None:
        d_silhouette = np.zeros((H, W))

    n = len(gmap)
    grads = RenderGradients(
        positions=np.zeros((n, 3)),
        colors=np.zeros((n, 3)),
        opacities=np.zeros(n),
        radii=np.zeros(n),
        pose=np.zeros(6),
    )
    m = cache.valid_idx.size
    if m == 0:
        return grads

    g_mu_p = np.zeros((m, 2))
    g_sigma = np.zeros(m)
    g_opac = np.zeros(m)
    g_col = np.zeros((m, 3))
    g_zdir = np.zeros(m)
    touched = np.zeros(m, dtype=np.uint8)
    _kernels.composite_backward(
        cache.tile_ptr, cache.tile_entries, cache.mu_p, cache.r_p,
        gmap.opacities[cache.valid_idx], gmap.colors[cache.valid_idx], cache.q[:, 2],
        W, H, cache.tiles_x, cache.tiles_y, cache.t_floor,
        np.ascontiguousarray(d_color), np.ascontiguousarray(d_depth),
        np.ascontiguousarray(d_silhouette),
        g_mu_p, g_sigma, g_opac, g_col, g_zdir, touched,
    )

    # Chain screen-space gradients through the projection.
    q = cache.q
    d = q[:, 2]
    fbar = K.mean_focal
    radii = gmap.radii[cache.valid_idx]
    g_q = np.empty((m, 3))
    g_q[:, 0] = g_mu_p[:, 0] * K.fx / d
    g_q[:, 1] = g_mu_p[:, 1] * K.fy / d
    g_q[:, 2] = (
        -g_mu_p[:, 0] * K.fx * q[:, 0] / (d * d)
        - g_mu_p[:, 1] * K.fy * q[:, 1] / (d * d)
        - g_sigma * fbar * radii / (d * d)
        + g_zdir
    )
    g_r = g_sigma * fbar / d

    R = cache.world_to_camera.rotation_matrix
    grads.positions[cache.valid_idx] = g_q @ R
    grads.colors[cache.valid_idx] = g_col
    grads.opacities[cache.valid_idx] = g_opac
    grads.radii[cache.valid_idx] = g_r
    grads.pose[:3] = np.cross(q, g_q).sum(axis=0)
    grads.pose[3:] = g_q.sum(axis=0)

    if accumulate_stats:
        pos_g = grads.positions[cache.valid_idx]
        hit = touched.astype(bool)
        idx = cache.valid_idx[hit]
        gmap.grad_vec_sum[idx] += pos_g[hit]
        gmap.grad_norm_sum[idx] += np.linalg.norm(pos_g[hit], axis=1)
        gmap.grad_count[idx] += 1
    return grads

"""Shared scene builders and gradient-check utilities for the test suite."""

import numpy as np

from splatslam.gaussian_map import GaussianMap
from splatslam.geometry import (
    CameraIntrinsics,
    SE3Pose,
    apply_pose_step,
    back_project,
    invert,
    so3_exp,
    transform_points,
)
from splatslam.renderer import render, render_backward


def random_pose(rng, translation_scale=3.0):
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0.0, np.pi)
    return SE3Pose.from_matrix(so3_exp(w), rng.normal(size=3) * translation_scale)


def make_random_scene(
    rng,
    n_gaussians=50,
    width=64,
    height=64,
    depth_range=(1.0, 8.0),
    opacity_range=(0.05, 0.95),
    screen_radius_range=(0.6, 5.0),
    behind_fraction=0.1,
):
    """Random splats placed inside a random camera's view frustum.

    A small fraction is placed behind the camera to exercise near-plane
    culling. Returns (map, intrinsics, camera_pose_world).
    """
    fx = rng.uniform(50.0, 75.0)
    fy = rng.uniform(50.0, 75.0)
    K = CameraIntrinsics(
        fx=fx,
        fy=fy,
        cx=(width - 1) / 2 + rng.uniform(-2, 2),
        cy=(height - 1) / 2 + rng.uniform(-2, 2),
        width=width,
        height=height,
    )
    pose = random_pose(rng)
    cam_to_world = pose
    positions = np.empty((n_gaussians, 3))
    radii = np.empty(n_gaussians)
    for i in range(n_gaussians):
        if rng.random() < behind_fraction:
            p_cam = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-3.0, -0.1)])
            radii[i] = rng.uniform(0.01, 0.5)
        else:
            pix = np.array([rng.uniform(1.0, width - 2.0), rng.uniform(1.0, height - 2.0)])
            d = rng.uniform(*depth_range)
            p_cam = back_project(K, pix, d)
            radii[i] = rng.uniform(*screen_radius_range) * d / K.mean_focal
        positions[i] = transform_points(cam_to_world, p_cam)
    gmap = GaussianMap.from_arrays(
        positions,
        rng.uniform(0.0, 1.0, size=(n_gaussians, 3)),
        rng.uniform(*opacity_range, size=n_gaussians),
        radii,
    )
    return gmap, K, pose


def linear_loss(rng, height, width, on_color=True, on_depth=True, on_sil=True):
    """A fixed random linear functional of the rendered images.

    Linear in the outputs, so its gradient images are constants and finite
    differences probe the renderer's own Jacobian.
    """
    A = rng.normal(size=(height, width, 3)) if on_color else np.zeros((height, width, 3))
    B = rng.normal(size=(height, width)) if on_depth else np.zeros((height, width))
    C = rng.normal(size=(height, width)) if on_sil else np.zeros((height, width))

    def fn(fr):
        loss = float(np.sum(A * fr.color) + np.sum(B * fr.depth) + np.sum(C * fr.silhouette))
        return loss, A, B, C, 0

    return fn


def gradient_check(gmap, K, pose, loss_fn, h=1e-5, t_floor=0.0, gaussian_indices=None):
    """Compare analytic gradients to central finite differences.

    loss_fn maps a RenderedFrame to (loss, d_color, d_depth, d_sil, state)
    where `state` is a hashable digest of every discrete choice inside the
    loss (masks, L1 signs). A parameter is excluded when either probe
    changes the render's support signature or the loss state: central
    differences are meaningless across those discontinuities.

    Returns (records, n_excluded); records are (name, analytic, fd).
    """
    fr0 = render(gmap, K, pose, transmittance_floor=t_floor)
    _, dC, dD, dS, state0 = loss_fn(fr0)
    sig0 = fr0.support_signature
    grads = render_backward(gmap, fr0, dC, dD, dS)

    def eval_loss(m, p):
        fr = render(m, K, p, transmittance_floor=t_floor)
        loss, _, _, _, state = loss_fn(fr)
        return loss, (fr.support_signature, state)

    records = []
    excluded = 0

    def probe(m_plus, m_minus, pose_plus, pose_minus, name, analytic):
        nonlocal excluded
        lp, sp = eval_loss(m_plus, pose_plus)
        lm, sm = eval_loss(m_minus, pose_minus)
        if sp != (sig0, state0) or sm != (sig0, state0):
            excluded += 1
            return
        records.append((name, analytic, (lp - lm) / (2.0 * h)))

    if gaussian_indices is None:
        gaussian_indices = range(len(gmap))
    attr_specs = [
        ("positions", gmap.positions, grads.positions),
        ("colors", gmap.colors, grads.colors),
        ("opacities", gmap.opacities, grads.opacities),
        ("radii", gmap.radii, grads.radii),
    ]
    for i in gaussian_indices:
        for attr, arr, ana in attr_specs:
            n_comp = arr.shape[1] if arr.ndim == 2 else 1
            for k in range(n_comp):
                mp = gmap.copy()
                mm = gmap.copy()
                if arr.ndim == 2:
                    getattr(mp, attr)[i, k] += h
                    getattr(mm, attr)[i, k] -= h
                    a = ana[i, k]
                else:
                    getattr(mp, attr)[i] += h
                    getattr(mm, attr)[i] -= h
                    a = ana[i]
                probe(mp, mm, pose, pose, f"{attr}[{i},{k}]", a)
    for k in range(6):
        xi = np.zeros(6)
        xi[k] = h
        probe(gmap, gmap, apply_pose_step(pose, xi), apply_pose_step(pose, -xi),
              f"pose[{k}]", grads.pose[k])
    return records, excluded


def max_relative_error(records, loss_scale=1.0):
    """Worst relative disagreement with an absolute floor for tiny gradients."""
    worst = 0.0
    floor = 1e-7 * max(1.0, abs(loss_scale))
    for _, a, f in records:
        denom = max(abs(a), abs(f))
        if denom < floor:
            continue
        worst = max(worst, abs(a - f) / denom)
    return worst

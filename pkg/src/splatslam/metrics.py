"""Trajectory and image-quality metrics: ATE RMSE, PSNR, SSIM."""

from __future__ import annotations

import numpy as np

from .geometry import SE3Pose
from .optimization import ssim

ASSOCIATION_MAX_DT = 0.05


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical images give positive infinity.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def associate_timestamps(
    times_a: np.ndarray,
    times_b: np.ndarray,
    max_dt: float = ASSOCIATION_MAX_DT,
) -> tuple[np.ndarray, np.ndarray]:
    """Pair each entry of `times_a` with its nearest entry of `times_b`.

    Pairs further apart than `max_dt` seconds are dropped. Returns index
    arrays (into a, into b) of equal length.
    """
    times_a = np.asarray(times_a, dtype=np.float64)
    times_b = np.asarray(times_b, dtype=np.float64)
    if len(times_a) == 0 or len(times_b) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    order = np.argsort(times_b, kind="stable")
    sorted_b = times_b[order]
    pos = np.searchsorted(sorted_b, times_a)
    idx_a = []
    idx_b = []
    for i, p in enumerate(pos):
        candidates = [c for c in (p - 1, p) if 0 <= c < len(sorted_b)]
        best = min(candidates, key=lambda c: abs(sorted_b[c] - times_a[i]))
        if abs(sorted_b[best] - times_a[i]) <= max_dt:
            idx_a.append(i)
            idx_b.append(int(order[best]))
    return np.asarray(idx_a, dtype=int), np.asarray(idx_b, dtype=int)


def align_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form least-squares rigid fit (R, t): R @ source + t ~ target.

    No scale. Standard SVD solution with the determinant sign fix.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    centroid_s = source.mean(axis=0)
    centroid_t = target.mean(axis=0)
    H = (source - centroid_s).T @ (target - centroid_t)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    t = centroid_t - R @ centroid_s
    return R, t


def ate_rmse(
    est_times: np.ndarray,
    est_poses: list[SE3Pose],
    gt_times: np.ndarray,
    gt_poses: list[SE3Pose],
    max_dt: float = ASSOCIATION_MAX_DT,
) -> float:
    """Absolute trajectory error RMSE in meters after rigid alignment.

    Trajectories are associated by nearest timestamp within `max_dt`; the
    estimate is aligned onto the ground truth by a closed-form SE3 fit (no
    scale), and the RMSE of the translational residuals is returned.

    Raises:
        ValueError: fewer than 2 associated pairs.
    """
    idx_e, idx_g = associate_timestamps(est_times, gt_times, max_dt)
    if len(idx_e) < 2:
        raise ValueError("need at least 2 associated trajectory pairs")
    est = np.stack([est_poses[i].translation for i in idx_e])
    gt = np.stack([gt_poses[i].translation for i in idx_g])
    R, t = align_rigid(est, gt)
    residual = est @ R.T + t - gt
    return float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))


__all__ = ["psnr", "ssim", "associate_timestamps", "align_rigid", "ate_rmse"]

"""Losses and optimizers for tracking and map refinement.

Tracking minimizes a silhouette-masked sum of absolute depth and color
errors; mapping minimizes a blend of mean absolute color error and
structural dissimilarity. Both come with hand-derived gradients w.r.t. the
rendered images so the renderer's backward pass can chain through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .renderer import RenderedFrame

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrackingConfig:
    """Knobs for per-frame pose tracking."""

    silhouette_threshold: float = 0.99
    color_weight: float = 0.5
    failure_threshold: float = 1e5
    iterations: int = 60
    rotation_lr: float = 2e-3
    translation_lr: float = 1e-3
    transmittance_floor: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.silhouette_threshold <= 1.0:
            raise ValueError("silhouette_threshold must lie in [0, 1]")
        if self.color_weight < 0.0:
            raise ValueError("color_weight must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


def tracking_loss(
    rendered: RenderedFrame,
    observed_color: np.ndarray,
    observed_depth: np.ndarray,
    depth_valid: np.ndarray,
    cfg: TrackingConfig,
) -> float:
    """Masked L1 objective for pose refinement.

    Pixels count only where the rendered silhouette exceeds the threshold,
    i.e. where the existing map actually explains the view; the depth term
    additionally requires a valid projected LiDAR depth. Sums (not means)
    so the failure threshold operates on the same scale regardless of how
    much of the image is masked away.
    """
    loss, _ = tracking_loss_with_gradients(
        rendered, observed_color, observed_depth, depth_valid, cfg
    )
    return loss


def tracking_loss_with_gradients(
    rendered: RenderedFrame,
    observed_color: np.ndarray,
    observed_depth: np.ndarray,
    depth_valid: np.ndarray,
    cfg: TrackingConfig,
):
    """Masked L1 pose-tracking loss and its image-space gradients.

    The depth residual compares the coverage-normalized rendered depth
    (accumulated depth divided by silhouette) with the observed sparse
    depth. Inside the mask the silhouette is close to one, so this matches
    the plain accumulated depth in the limit, but it removes the
    systematic underestimate of surface depth at partially covered pixels,
    which otherwise drags pose refinement backward off the true pose.

    Returns (loss, (d_color, d_depth, d_silhouette)) treating the mask as
    constant.
    """
    mask = rendered.silhouette > cfg.silhouette_threshold
    depth_mask = mask & depth_valid
    sil = np.where(depth_mask, rendered.silhouette, 1.0)
    est_depth = rendered.depth / sil
    depth_res = est_depth - observed_depth
    color_res = rendered.color - observed_color
    loss = float(
        np.sum(np.abs(depth_res[depth_mask]))
        + cfg.color_weight * np.sum(np.abs(color_res[mask]))
    )
    sign = np.sign(depth_res)
    d_depth = np.where(depth_mask, sign / sil, 0.0)
    d_sil = np.where(depth_mask, -sign * rendered.depth / (sil * sil), 0.0)
    d_color = np.where(mask[..., None], cfg.color_weight * np.sign(color_res), 0.0)
    return loss, (d_color, d_depth, d_sil)


# --- SSIM -------------------------------------------------------------------

_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_RADIUS = int(_SSIM_TRUNCATE * _SSIM_SIGMA + 0.5)  # 11x11 window


def _ssim_window() -> np.ndarray:
    x = np.arange(-_SSIM_RADIUS, _SSIM_RADIUS + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / _SSIM_SIGMA) ** 2)
    return w / w.sum()


_WINDOW = _ssim_window()


def _filter(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian window filter (zero padding; interior is exact)."""
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def _crop(img: np.ndarray) -> np.ndarray:
    r = _SSIM_RADIUS
    return img[r:-r, r:-r]


def _ssim_channel(x, y):
    """Per-pixel SSIM over fully covered windows plus the field terms.

    Returns (S, terms) where terms carry what the gradient needs.
    """
    C1 = _SSIM_K1 ** 2
    C2 = _SSIM_K2 ** 2
    ux = _crop(_filter(x))
    uy = _crop(_filter(y))
    uxx = _crop(_filter(x * x))
    uyy = _crop(_filter(y * y))
    uxy = _crop(_filter(x * y))
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    A1 = 2.0 * ux * uy + C1
    A2 = 2.0 * vxy + C2
    B1 = ux * ux + uy * uy + C1
    B2 = vx + vy + C2
    S = (A1 * A2) / (B1 * B2)
    return S, (ux, uy, A1, A2, B1, B2)


def ssim(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Mean structural similarity, Gaussian 11x11 window, data range 1.

    Images are (H, W) or (H, W, C) float arrays in [0, 1]; channels are
    averaged. The mean runs over windows that fit entirely inside the
    image, so H and W must be at least 11.
    """
    return _ssim_impl(image_a, image_b, with_gradient=False)[0]


def ssim_with_gradient(image_a: np.ndarray, image_b: np.ndarray):
    """Returns (ssim, d_ssim / d_image_a)."""
    return _ssim_impl(image_a, image_b, with_gradient=True)


def _ssim_impl(image_a, image_b, with_gradient):
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    H, W, n_ch = a.shape
    win = 2 * _SSIM_RADIUS + 1
    if H < win or W < win:
        raise ValueError(f"images must be at least {win}x{win} for SSIM")
    total = 0.0
    grad = np.zeros((H, W, n_ch)) if with_gradient else None
    n_valid = (H - win + 1) * (W - win + 1)
    for ch in range(n_ch):
        x = a[..., ch]
        y = b[..., ch]
        S, (ux, uy, A1, A2, B1, B2) = _ssim_channel(x, y)
        total += float(S.mean())
        if not with_gradient:
            continue
        # dS/d(window moments), then push each moment back through the
        # window filter. The filter is self-adjoint (symmetric kernel with
        # zero padding), so "spread" = zero-embed the valid field + filter.
        p_mu = 2.0 * uy * A2 / (B1 * B2) - 2.0 * ux * S / B1
        p_var = -S / B2
        p_cov = 2.0 * A1 / (B1 * B2)

        def spread(field):
            full = np.zeros((H, W))
            full[_SSIM_RADIUS:-_SSIM_RADIUS, _SSIM_RADIUS:-_SSIM_RADIUS] = field
            return _filter(full)

        g = (
            spread(p_mu)
            + 2.0 * x * spread(p_var)
            - 2.0 * spread(p_var * ux)
            + y * spread(p_cov)
            - spread(p_cov * uy)
        )
        grad[..., ch] = g / (n_ch * n_valid)
    mean = total / n_ch
    return (mean, grad) if with_gradient else (mean, None)


# --- Mapping loss -----------------------------------------------------------


@dataclass
class MappingConfig:
    """Knobs for the map-update optimization."""

    keyframe_window: int = 20
    ssim_weight: float = 0.2
    iterations: int = 100
    keyframe_interval: int = 5
    position_lr: float = 1e-3
    color_lr: float = 2.5e-3
    opacity_lr: float = 5e-2
    radius_lr: float = 1e-3
    prune_opacity_min: float = 0.005
    prune_radius_max: float = 1.0
    densify_grad_threshold: float = 2e-4
    transmittance_floor: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError("ssim_weight must lie in [0, 1]")
        if self.keyframe_window < 1:
            raise ValueError("keyframe_window must be at least 1")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


def mapping_loss(rendered_color: np.ndarray, observed_color: np.ndarray,
                 ssim_weight: float) -> float:
    loss, _ = mapping_loss_with_gradients(rendered_color, observed_color, ssim_weight)
    return loss


def mapping_loss_with_gradients(rendered_color, observed_color, ssim_weight):
    """(1 - w) * mean|r - o| + w * (1 - SSIM(r, o)) and its color gradient."""
    res = rendered_color - observed_color
    l1 = float(np.mean(np.abs(res)))
    d_l1 = np.sign(res) / res.size
    s, d_s = ssim_with_gradient(rendered_color, observed_color)
    loss = (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - s)
    d_color = (1.0 - ssim_weight) * d_l1 - ssim_weight * d_s
    return loss, d_color


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr) -> np.ndarray:
    """One bias-corrected Adam update; mutates `state`, returns new params.

    `lr` may be a scalar or an array broadcastable against the parameters
    (used for per-component pose learning rates).
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient")
    state.step += 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads * grads
    m_hat = state.m / (1.0 - ADAM_BETA1 ** state.step)
    v_hat = state.v / (1.0 - ADAM_BETA2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

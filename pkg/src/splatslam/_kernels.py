"""Numba inner loops for splat compositing and voxel-grid nearest neighbors.

Everything here is single-threaded and float64 so results are deterministic
and independent of thread count. The compositing rules (footprint cutoff at
3 sigma, minimum-contribution skip, opacity clamp, front-to-back order,
optional transmittance floor) live in these loops; the numpy reference
renderer reimplements the same rules independently for cross-checking.
"""

from __future__ import annotations

import numpy as np
from numba import njit

TILE = 16
CUTOFF_SIGMAS = 3.0
F_MIN = 1.0 / 255.0
F_MAX = 0.9999

_HASH_MULT = np.uint64(1099511628211)


@njit(cache=True)
def tile_rects(mu_p, r_p, width, height, tiles_x, tiles_y):
    """Tile-index bounding rect per splat; x1 < x0 marks an empty rect."""
    n = mu_p.shape[0]
    rects = np.empty((n, 4), dtype=np.int64)
    for i in range(n):
        reach = CUTOFF_SIGMAS * r_p[i]
        lo_x = mu_p[i, 0] - reach
        hi_x = mu_p[i, 0] + reach
        lo_y = mu_p[i, 1] - reach
        hi_y = mu_p[i, 1] + reach
        if hi_x < 0.0 or lo_x > width - 1.0 or hi_y < 0.0 or lo_y > height - 1.0:
            rects[i, 0] = 0
            rects[i, 1] = -1
            rects[i, 2] = 0
            rects[i, 3] = -1
            continue
        x0 = int(np.floor(lo_x / TILE))
        x1 = int(np.floor(hi_x / TILE))
        y0 = int(np.floor(lo_y / TILE))
        y1 = int(np.floor(hi_y / TILE))
        rects[i, 0] = max(x0, 0)
        rects[i, 1] = min(x1, tiles_x - 1)
        rects[i, 2] = max(y0, 0)
        rects[i, 3] = min(y1, tiles_y - 1)
    return rects


@njit(cache=True)
def build_tile_lists(order, rects, tiles_x, tiles_y):
    """CSR tile lists; entries are global splat indices in depth order."""
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles, dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        if rects[i, 1] < rects[i, 0] or rects[i, 3] < rects[i, 2]:
            continue
        for ty in range(rects[i, 2], rects[i, 3] + 1):
            for tx in range(rects[i, 0], rects[i, 1] + 1):
                counts[ty * tiles_x + tx] += 1
    ptr = np.zeros(n_tiles + 1, dtype=np.int64)
    for t in range(n_tiles):
        ptr[t + 1] = ptr[t] + counts[t]
    entries = np.empty(ptr[n_tiles], dtype=np.int64)
    cursor = ptr[:-1].copy()
    for k in range(order.shape[0]):
        i = order[k]
        if rects[i, 1] < rects[i, 0] or rects[i, 3] < rects[i, 2]:
            continue
        for ty in range(rects[i, 2], rects[i, 3] + 1):
            for tx in range(rects[i, 0], rects[i, 1] + 1):
                t = ty * tiles_x + tx
                entries[cursor[t]] = i
                cursor[t] += 1
    return ptr, entries


@njit(cache=True)
def composite_forward(
    ptr,
    entries,
    mu_p,
    r_p,
    opacity,
    color,
    depth,
    width,
    height,
    tiles_x,
    tiles_y,
    t_floor,
    out_color,
    out_depth,
    out_sil,
):
    """Front-to-back alpha compositing over tile lists.

    Fills out_color (H, W, 3), out_depth (H, W), out_sil (H, W) and returns
    an order-sensitive hash of the exact contribution sequence
    (pixel, splat, clamped-flag). Two forward passes composite the same
    contributions in the same order iff their hashes agree.
    """
    sig = np.uint64(1469598103934665603)
    for ty in range(tiles_y):
        y0 = ty * TILE
        y1 = min(y0 + TILE, height)
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            lo = ptr[t]
            hi = ptr[t + 1]
            if lo == hi:
                continue
            x0 = tx * TILE
            x1 = min(x0 + TILE, width)
            for v in range(y0, y1):
                for u in range(x0, x1):
                    trans = 1.0
                    acc_r = 0.0
                    acc_g = 0.0
                    acc_b = 0.0
                    acc_d = 0.0
                    acc_s = 0.0
                    for e in range(lo, hi):
                        i = entries[e]
                        dx = u - mu_p[i, 0]
                        dy = v - mu_p[i, 1]
                        d2 = dx * dx + dy * dy
                        reach = CUTOFF_SIGMAS * r_p[i]
                        if d2 > reach * reach:
                            continue
                        f = opacity[i] * np.exp(-0.5 * d2 / (r_p[i] * r_p[i]))
                        if f < F_MIN:
                            continue
                        clamped = np.uint64(0)
                        if f > F_MAX:
                            f = F_MAX
                            clamped = np.uint64(1)
                        w = f * trans
                        acc_r += color[i, 0] * w
                        acc_g += color[i, 1] * w
                        acc_b += color[i, 2] * w
                        acc_d += depth[i] * w
                        acc_s += w
                        code = (
                            np.uint64(v * width + u) * np.uint64(2097152)
                            + np.uint64(i) * np.uint64(2)
                            + clamped
                        )
                        sig = sig * _HASH_MULT + code
                        trans *= 1.0 - f
                        if t_floor > 0.0 and trans < t_floor:
                            break
                    out_color[v, u, 0] = acc_r
                    out_color[v, u, 1] = acc_g
                    out_color[v, u, 2] = acc_b
                    out_depth[v, u] = acc_d
                    out_sil[v, u] = acc_s
    return sig


@njit(cache=True)
def composite_backward(
    ptr,
    entries,
    mu_p,
    r_p,
    opacity,
    color,
    depth,
    width,
    height,
    tiles_x,
    tiles_y,
    t_floor,
    g_color,
    g_depth,
    g_sil,
    grad_mu_p,
    grad_sigma,
    grad_opacity,
    grad_color,
    grad_depth_direct,
    touched,
):
    """Adjoint of :func:`composite_forward`.

    Replays each pixel's contribution sequence, then walks it backwards
    accumulating per-splat gradients in screen space:

      grad_mu_p        dL/d(projected center), pixels
      grad_sigma       dL/d(projected radius), pixels
      grad_opacity     dL/d(opacity)
      grad_color       dL/d(color)
      grad_depth_direct dL/d(camera depth) through the depth channel only

    A clamped contribution propagates color/depth-channel gradients (its
    blend weight is unaffected by the clamp) but blocks opacity/center/radius
    gradients, matching a zero local derivative of the clamp.
    """
    max_seg = 0
    n_tiles = tiles_x * tiles_y
    for t in range(n_tiles):
        seg = ptr[t + 1] - ptr[t]
        if seg > max_seg:
            max_seg = seg
    buf_idx = np.empty(max_seg, dtype=np.int64)
    buf_f = np.empty(max_seg, dtype=np.float64)
    buf_w = np.empty(max_seg, dtype=np.float64)
    buf_a = np.empty(max_seg, dtype=np.float64)
    buf_t = np.empty(max_seg, dtype=np.float64)
    buf_d2 = np.empty(max_seg, dtype=np.float64)
    buf_dx = np.empty(max_seg, dtype=np.float64)
    buf_dy = np.empty(max_seg, dtype=np.float64)
    buf_cl = np.empty(max_seg, dtype=np.uint8)

    for ty in range(tiles_y):
        y0 = ty * TILE
        y1 = min(y0 + TILE, height)
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            lo = ptr[t]
            hi = ptr[t + 1]
            if lo == hi:
                continue
            x0 = tx * TILE
            x1 = min(x0 + TILE, width)
            for v in range(y0, y1):
                for u in range(x0, x1):
                    gc_r = g_color[v, u, 0]
                    gc_g = g_color[v, u, 1]
                    gc_b = g_color[v, u, 2]
                    gd = g_depth[v, u]
                    gs = g_sil[v, u]
                    # Replay the forward sequence for this pixel.
                    m = 0
                    trans = 1.0
                    for e in range(lo, hi):
                        i = entries[e]
                        dx = u - mu_p[i, 0]
                        dy = v - mu_p[i, 1]
                        d2 = dx * dx + dy * dy
                        reach = CUTOFF_SIGMAS * r_p[i]
                        if d2 > reach * reach:
                            continue
                        f = opacity[i] * np.exp(-0.5 * d2 / (r_p[i] * r_p[i]))
                        if f < F_MIN:
                            continue
                        cl = np.uint8(0)
                        if f > F_MAX:
                            f = F_MAX
                            cl = np.uint8(1)
                        w = f * trans
                        buf_idx[m] = i
                        buf_f[m] = f
                        buf_w[m] = w
                        buf_t[m] = trans
                        buf_d2[m] = d2
                        buf_dx[m] = dx
                        buf_dy[m] = dy
                        buf_cl[m] = cl
                        # dL/dw for this contribution.
                        buf_a[m] = gc_r * color[i, 0] + gc_g * color[i, 1] + gc_b * color[i, 2] + gd * depth[i] + gs
                        m += 1
                        trans *= 1.0 - f
                        if t_floor > 0.0 and trans < t_floor:
                            break
                    if m == 0:
                        continue
                    # Backward sweep: suffix accumulates sum_{j>i} a_j * w_j.
                    suffix = 0.0
                    for k in range(m - 1, -1, -1):
                        i = buf_idx[k]
                        w = buf_w[k]
                        touched[i] = 1
                        grad_color[i, 0] += gc_r * w
                        grad_color[i, 1] += gc_g * w
                        grad_color[i, 2] += gc_b * w
                        grad_depth_direct[i] += gd * w
                        if buf_cl[k] == 0:
                            f = buf_f[k]
                            df = buf_a[k] * buf_t[k] - suffix / (1.0 - f)
                            sigma2 = r_p[i] * r_p[i]
                            grad_opacity[i] += df * f / opacity[i]
                            gmu = df * f / sigma2
                            grad_mu_p[i, 0] += gmu * buf_dx[k]
                            grad_mu_p[i, 1] += gmu * buf_dy[k]
                            grad_sigma[i] += df * f * buf_d2[k] / (sigma2 * r_p[i])
                        suffix += buf_a[k] * buf_w[k]


@njit(cache=True)
def voxel_nn_query(
    query,
    keys_sorted,
    slot_of_sorted,
    cell_start,
    map_points,
    voxel,
    max_dist,
):
    """Nearest map point per query within max_dist, via a 27-cell voxel hash.

    keys_sorted: sorted unique packed cell keys.
    slot_of_sorted/cell_start: CSR over map point indices grouped by cell.
    Returns (index, squared distance) per query; index -1 when nothing is
    within max_dist. Exact as long as voxel >= max_dist.
    """
    n = query.shape[0]
    out_idx = np.full(n, -1, dtype=np.int64)
    out_d2 = np.full(n, np.inf, dtype=np.float64)
    n_cells = keys_sorted.shape[0]
    max_d2 = max_dist * max_dist
    off = np.int64(1) << np.int64(20)
    for qi in range(n):
        qx = query[qi, 0]
        qy = query[qi, 1]
        qz = query[qi, 2]
        cx = np.int64(np.floor(qx / voxel))
        cy = np.int64(np.floor(qy / voxel))
        cz = np.int64(np.floor(qz / voxel))
        best_d2 = max_d2
        best_i = np.int64(-1)
        for ox in range(-1, 2):
            for oy in range(-1, 2):
                for oz in range(-1, 2):
                    key = (
                        ((cx + ox + off) << np.int64(42))
                        + ((cy + oy + off) << np.int64(21))
                        + (cz + oz + off)
                    )
                    # Binary search in the sorted unique keys.
                    lo = 0
                    hi = n_cells
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if keys_sorted[mid] < key:
                            lo = mid + 1
                        else:
                            hi = mid
                    if lo >= n_cells or keys_sorted[lo] != key:
                        continue
                    for s in range(cell_start[lo], cell_start[lo + 1]):
                        mi = slot_of_sorted[s]
                        dx = map_points[mi, 0] - qx
                        dy = map_points[mi, 1] - qy
                        dz = map_points[mi, 2] - qz
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 < best_d2:
                            best_d2 = d2
                            best_i = mi
        if best_i >= 0:
            out_idx[qi] = best_i
            out_d2[qi] = best_d2
    return out_idx, out_d2


def warm_up():
    """Trigger JIT compilation of all kernels on tiny inputs."""
    mu = np.array([[1.0, 1.0]])
    rp = np.array([1.0])
    rects = tile_rects(mu, rp, 4, 4, 1, 1)
    order = np.array([0], dtype=np.int64)
    ptr, entries = build_tile_lists(order, rects, 1, 1)
    o = np.array([0.5])
    c = np.array([[1.0, 1.0, 1.0]])
    z = np.array([1.0])
    img = np.zeros((4, 4, 3))
    dep = np.zeros((4, 4))
    sil = np.zeros((4, 4))
    composite_forward(ptr, entries, mu, rp, o, c, z, 4, 4, 1, 1, 0.0, img, dep, sil)
    composite_backward(
        ptr, entries, mu, rp, o, c, z, 4, 4, 1, 1, 0.0,
        img, dep, sil,
        np.zeros((1, 2)), np.zeros(1), np.zeros(1), np.zeros((1, 3)), np.zeros(1),
        np.zeros(1, dtype=np.uint8),
    )
    pts = np.zeros((1, 3))
    keys = np.array([((1 << 20) << 42) + ((1 << 20) << 21) + (1 << 20)], dtype=np.int64)
    voxel_nn_query(
        pts, keys, np.array([0], dtype=np.int64), np.array([0, 1], dtype=np.int64),
        pts, 1.0, 1.0,
    )

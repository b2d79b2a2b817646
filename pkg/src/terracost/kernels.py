"""Hot inner loops, each with a numba kernel and a numpy equivalent.

The public names at the bottom of the module are bound to one of the two
implementations according to :data:`terracost._jit.USE_JIT`.  Both variants
are always importable (``*_numpy`` / ``*_loop``) so tests and the benchmark can
compare them directly.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from terracost._jit import USE_JIT, njit

# -- raster sampling ----------------------------------------------------------


def bilinear_numpy(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = data.shape
    r0 = np.minimum(np.floor(rows).astype(np.int64), h - 1)
    c0 = np.minimum(np.floor(cols).astype(np.int64), w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = rows - r0
    fc = cols - c0
    d = data.astype(np.float64, copy=False)
    top = (1.0 - fc) * d[r0, c0] + fc * d[r0, c1]
    bottom = (1.0 - fc) * d[r1, c0] + fc * d[r1, c1]
    return (1.0 - fr) * top + fr * bottom


@njit
def bilinear_loop(data, rows, cols):
    h, w = data.shape
    flat_r = rows.ravel()
    flat_c = cols.ravel()
    out = np.empty(flat_r.size, dtype=np.float64)
    for i in range(flat_r.size):
        r0 = min(int(math.floor(flat_r[i])), h - 1)
        c0 = min(int(math.floor(flat_c[i])), w - 1)
        r1 = min(r0 + 1, h - 1)
        c1 = min(c0 + 1, w - 1)
        fr = flat_r[i] - r0
        fc = flat_c[i] - c0
        top = (1.0 - fc) * np.float64(data[r0, c0]) + fc * np.float64(data[r0, c1])
        bottom = (1.0 - fc) * np.float64(data[r1, c0]) + fc * np.float64(data[r1, c1])
        out[i] = (1.0 - fr) * top + fr * bottom
    return out.reshape(rows.shape)


def nearest_numpy(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    r = np.ceil(rows - 0.5).astype(np.int64)
    c = np.ceil(cols - 0.5).astype(np.int64)
    return data[r, c].astype(np.float64)


@njit
def nearest_loop(data, rows, cols):
    flat_r = rows.ravel()
    flat_c = cols.ravel()
    out = np.empty(flat_r.size, dtype=np.float64)
    for i in range(flat_r.size):
        out[i] = data[int(math.ceil(flat_r[i] - 0.5)), int(math.ceil(flat_c[i] - 0.5))]
    return out.reshape(rows.shape)


# -- convolution lowering (NHWC) ---------------------------------------------


def im2col_numpy(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, Hp, Wp, C) padded input -> (N, Ho, Wo, k, k, C) patch tensor."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


@njit
def im2col_loop(xp, k, stride):
    n, hp, wp, c = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    out = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ki in range(k):
                    for kj in range(k):
                        for ch in range(c):
                            out[b, i, j, ki, kj, ch] = xp[b, i * stride + ki, j * stride + kj, ch]
    return out


def col2im_numpy(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col_numpy`: scatter-add patches back to (N, Hp, Wp, C)."""
    n, ho, wo, k, _, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride, :] += cols[:, :, :, ki, kj, :]
    return out


@njit
def col2im_loop(cols, hp, wp, stride):
    n, ho, wo, k, _, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    # same accumulation order as the numpy path (ki, kj outermost) for identical rounding
    for ki in range(k):
        for kj in range(k):
            for b in range(n):
                for i in range(ho):
                    for j in range(wo):
                        for ch in range(c):
                            out[b, i * stride + ki, j * stride + kj, ch] += cols[b, i, j, ki, kj, ch]
    return out


# -- oracle dynamics -----------------------------------------------------------


@njit
def oracle_velocity_scalar(slope, kappa, v_max, v_min, up_gain, down_gain):
    t = math.tan(slope)
    v = v_max * kappa * (1.0 - up_gain * max(t, 0.0) - down_gain * max(-t, 0.0))
    return min(max(v, v_min), v_max)


@njit
def oracle_power_scalar(slope, mu, v, mass, gravity, idle):
    mech = mass * gravity * v * (mu * math.cos(slope) + math.sin(slope))
    return max(idle, idle + mech)


@njit
def simulate_loop(height, classes, geo, points, cum, mu_by_label, kappa_by_label, params, max_steps):
    """Integrate motion along a polyline at oracle speed.

    ``geo`` = (origin_x, origin_y, resolution); ``params`` = (v_max, v_min,
    uphill_gain, downhill_gain, mass, gravity, idle_power, dt).  Returns
    ``(status, k, out)`` where ``out[:k]`` holds rows (t, x, y, speed, power,
    slope).  status: 0 ok, 1 out of bounds, 2 non-traversable, 3 step budget.
    """
    ox, oy, res = geo[0], geo[1], geo[2]
    v_max, v_min, up, down = params[0], params[1], params[2], params[3]
    mass, grav, idle, dt = params[4], params[5], params[6], params[7]
    h, w = height.shape
    total = cum[-1]
    out = np.empty((max_steps, 6), dtype=np.float64)
    seg = 0
    s = 0.0
    k = 0
    while k < max_steps:
        while seg < len(points) - 2 and s > cum[seg + 1]:
            seg += 1
        seg_len = cum[seg + 1] - cum[seg]
        ux = (points[seg + 1, 0] - points[seg, 0]) / seg_len
        uy = (points[seg + 1, 1] - points[seg, 1]) / seg_len
        f = (s - cum[seg]) / seg_len
        x = points[seg, 0] + f * (points[seg + 1, 0] - points[seg, 0])
        y = points[seg, 1] + f * (points[seg + 1, 1] - points[seg, 1])
        if s >= total:
            x = points[len(points) - 1, 0]
            y = points[len(points) - 1, 1]
        # central difference over one cell along the heading
        hv = np.empty(2)
        for side in range(2):
            sgn = 1.0 if side == 0 else -1.0
            px = x + sgn * res * ux
            py = y + sgn * res * uy
            col = (px - ox) / res
            row = (oy - py) / res
            if not (0.0 <= row <= h - 1 and 0.0 <= col <= w - 1):
                return 1, k, out
            r0 = min(int(math.floor(row)), h - 1)
            c0 = min(int(math.floor(col)), w - 1)
            r1 = min(r0 + 1, h - 1)
            c1 = min(c0 + 1, w - 1)
            fr = row - r0
            fc = col - c0
            top = (1.0 - fc) * np.float64(height[r0, c0]) + fc * np.float64(height[r0, c1])
            bot = (1.0 - fc) * np.float64(height[r1, c0]) + fc * np.float64(height[r1, c1])
            hv[side] = (1.0 - fr) * top + fr * bot
        slope = math.atan((hv[0] - hv[1]) / (2.0 * res))
        label = int(classes[int(math.ceil((oy - y) / res - 0.5)), int(math.ceil((x - ox) / res - 0.5))])
        if label <= 0 or label >= len(kappa_by_label) or kappa_by_label[label] <= 0.0:
            return 2, k, out
        v = oracle_velocity_scalar(slope, kappa_by_label[label], v_max, v_min, up, down)
        p = oracle_power_scalar(slope, mu_by_label[label], v, mass, grav, idle)
        out[k, 0] = k * dt
        out[k, 1] = x
        out[k, 2] = y
        out[k, 3] = v
        out[k, 4] = p
        out[k, 5] = slope
        k += 1
        if s >= total:
            return 0, k, out
        s = min(s + v * dt, total)
    return 3, k, out


if USE_JIT:
    bilinear = bilinear_loop
    nearest = nearest_loop
    im2col = im2col_loop
    col2im = col2im_loop
else:
    bilinear = bilinear_numpy
    nearest = nearest_numpy
    im2col = im2col_numpy
    col2im = col2im_numpy

simulate = simulate_loop

"""Hot numeric kernels, each in a numba flavour and a vectorized numpy flavour.

The public names at the bottom dispatch on ``recipnet._accel.USE_NUMBA``.
Both flavours stay importable as ``NUMBA_KERNELS`` / ``NUMPY_KERNELS`` so the
tests can check them against each other and the benchmark can time them.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit

# status codes returned by the bilinear sampler
OK, OUT_OF_EXTENT, NODATA = 0, 1, 2

# excess heights above this (meters, relative to the LOS) count as obstructing;
# the slack absorbs rounding on surfaces that exactly graze the LOS
EDGE_TOL = 1e-9


# --------------------------------------------------------------------------
# bilinear sampling on a top-first raster with NaN nodata


@njit
def _bilinear_nb(filled, x0, y0, cs, xs, ys):
    nrows, ncols = filled.shape
    n = xs.shape[0]
    out = np.empty(n)
    status = np.zeros(n, dtype=np.int8)
    for k in range(n):
        fx = (xs[k] - x0) / cs - 0.5
        fy = (ys[k] - y0) / cs - 0.5
        if not (fx >= 0.0 and fx <= ncols - 1 and fy >= 0.0 and fy <= nrows - 1):
            out[k] = np.nan
            status[k] = OUT_OF_EXTENT
            continue
        c0 = min(int(math.floor(fx)), ncols - 2)
        b0 = min(int(math.floor(fy)), nrows - 2)
        tx = fx - c0
        ty = fy - b0
        r0 = nrows - 1 - b0  # storage row of the lower neighbour
        v00 = filled[r0, c0]
        v01 = filled[r0, c0 + 1]
        v10 = filled[r0 - 1, c0]
        v11 = filled[r0 - 1, c0 + 1]
        if np.isnan(v00) or np.isnan(v01) or np.isnan(v10) or np.isnan(v11):
            out[k] = np.nan
            status[k] = NODATA
            continue
        lo = v00 * (1.0 - tx) + v01 * tx
        hi = v10 * (1.0 - tx) + v11 * tx
        out[k] = lo * (1.0 - ty) + hi * ty
    return out, status


def _bilinear_np(filled, x0, y0, cs, xs, ys):
    nrows, ncols = filled.shape
    fx = (xs - x0) / cs - 0.5
    fy = (ys - y0) / cs - 0.5
    inside = (fx >= 0.0) & (fx <= ncols - 1) & (fy >= 0.0) & (fy <= nrows - 1)
    fxc = np.where(inside, fx, 0.0)
    fyc = np.where(inside, fy, 0.0)
    c0 = np.minimum(np.floor(fxc).astype(np.int64), ncols - 2)
    b0 = np.minimum(np.floor(fyc).astype(np.int64), nrows - 2)
    tx = fxc - c0
    ty = fyc - b0
    r0 = nrows - 1 - b0
    v00 = filled[r0, c0]
    v01 = filled[r0, c0 + 1]
    v10 = filled[r0 - 1, c0]
    v11 = filled[r0 - 1, c0 + 1]
    lo = v00 * (1.0 - tx) + v01 * tx
    hi = v10 * (1.0 - tx) + v11 * tx
    out = lo * (1.0 - ty) + hi * ty
    nodata = inside & (np.isnan(v00) | np.isnan(v01) | np.isnan(v10) | np.isnan(v11))
    status = np.zeros(xs.shape[0], dtype=np.int8)
    status[~inside] = OUT_OF_EXTENT
    status[nodata] = NODATA
    out[status != OK] = np.nan
    return out, status


# --------------------------------------------------------------------------
# im2col / col2im, column layout (C*kh*kw, N*Ho*Wo)


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


@njit
def _im2col_nb(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.zeros((c * kh * kw, n * ho * wo), dtype=x.dtype)
    for ci in range(c):
        for dy in range(kh):
            for dx in range(kw):
                row = (ci * kh + dy) * kw + dx
                for b in range(n):
                    for oy in range(ho):
                        iy = oy * stride + dy - pad
                        if iy < 0 or iy >= h:
                            continue
                        base = (b * ho + oy) * wo
                        for ox in range(wo):
                            ix = ox * stride + dx - pad
                            if ix >= 0 and ix < w:
                                cols[row, base + ox] = x[b, ci, iy, ix]
    return cols


def _im2col_np(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, :, dy:dy + stride * (ho - 1) + 1:stride,
                       dx:dx + stride * (wo - 1) + 1:stride]
            cols[:, dy, dx] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


@njit
def _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for ci in range(c):
        for dy in range(kh):
            for dx in range(kw):
                row = (ci * kh + dy) * kw + dx
                for b in range(n):
                    for oy in range(ho):
                        iy = oy * stride + dy - pad
                        if iy < 0 or iy >= h:
                            continue
                        base = (b * ho + oy) * wo
                        for ox in range(wo):
                            ix = ox * stride + dx - pad
                            if ix >= 0 and ix < w:
                                out[b, ci, iy, ix] += cols[row, base + ox]
    return out


def _col2im_np(cols, n, c, h, w, kh, kw, stride, pad):
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for dy in range(kh):
        for dx in range(kw):
            out[:, :, dy:dy + stride * (ho - 1) + 1:stride,
                dx:dx + stride * (wo - 1) + 1:stride] += cols[:, dy, dx].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


# --------------------------------------------------------------------------
# 2x2 / stride-2 max pooling; odd trailing rows/cols are dropped


@njit
def _maxpool_fwd_nb(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int8)
    for b in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = x[b, ci, 2 * oy, 2 * ox]
                    k = 0
                    for q in range(1, 4):
                        v = x[b, ci, 2 * oy + q // 2, 2 * ox + q % 2]
                        if v > best:
                            best = v
                            k = q
                    out[b, ci, oy, ox] = best
                    arg[b, ci, oy, ox] = k
    return out, arg


def _maxpool_fwd_np(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = np.argmax(blocks, axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


@njit
def _maxpool_bwd_nb(grad, arg, h, w):
    n, c, ho, wo = grad.shape
    out = np.zeros((n, c, h, w), dtype=grad.dtype)
    for b in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    k = arg[b, ci, oy, ox]
                    out[b, ci, 2 * oy + k // 2, 2 * ox + k % 2] = grad[b, ci, oy, ox]
    return out


def _maxpool_bwd_np(grad, arg, h, w):
    n, c, ho, wo = grad.shape
    blocks = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
    np.put_along_axis(blocks, arg[..., None].astype(np.intp), grad[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    out = np.zeros((n, c, h, w), dtype=grad.dtype)
    out[:, :, :2 * ho, :2 * wo] = blocks.reshape(n, c, 2 * ho, 2 * wo)
    return out


# --------------------------------------------------------------------------
# Epstein-Peterson multiple knife-edge loss along sampled link axes


@njit
def knife_edge_j(v):
    """Single knife-edge diffraction loss J(v) in dB; zero for v <= -0.78."""
    if v <= -0.78:
        return 0.0
    return 6.9 + 20.0 * math.log10(math.sqrt((v - 0.1) ** 2 + 1.0) + v - 0.1)


@njit
def _ep_loss_nb(surface, dist, za, zb, wavelength):
    m, n = surface.shape
    out = np.zeros(m)
    pos = np.empty(n)
    top = np.empty(n)
    for li in range(m):
        d = dist[li]
        a = za[li]
        b = zb[li]
        ne = 0
        k = 1
        while k < n - 1:
            f = k / (n - 1)
            e = surface[li, k] - (a + f * (b - a))
            if e >= -EDGE_TOL:
                best = e
                bk = k
                k += 1
                while k < n - 1:
                    f = k / (n - 1)
                    e = surface[li, k] - (a + f * (b - a))
                    if e < -EDGE_TOL:
                        break
                    if e > best:
                        best = e
                        bk = k
                    k += 1
                pos[ne] = (bk / (n - 1)) * d
                top[ne] = surface[li, bk]
                ne += 1
            k += 1
        total = 0.0
        lam = wavelength[li]
        for q in range(ne):
            if q == 0:
                xp, zp = 0.0, a
            else:
                xp, zp = pos[q - 1], top[q - 1]
            if q == ne - 1:
                xn, zn = d, b
            else:
                xn, zn = pos[q + 1], top[q + 1]
            d1 = pos[q] - xp
            d2 = xn - pos[q]
            if d1 <= 0.0 or d2 <= 0.0:
                continue
            chord = zp + (d1 / (d1 + d2)) * (zn - zp)
            h = top[q] - chord
            v = h * math.sqrt(2.0 * (d1 + d2) / (lam * d1 * d2))
            total += knife_edge_j(v)
        out[li] = total
    return out


def _edges_np(s, d, a, b):
    n = s.shape[0]
    k = np.arange(1, n - 1)
    f = k / (n - 1)
    e = s[1:-1] - (a + f * (b - a))
    obstructed = e >= -EDGE_TOL
    if not obstructed.any():
        return np.empty(0), np.empty(0)
    flips = np.diff(np.concatenate(([0], obstructed.astype(np.int8), [0])))
    starts = np.flatnonzero(flips == 1)
    stops = np.flatnonzero(flips == -1)
    idx = np.array([lo + int(np.argmax(e[lo:hi])) for lo, hi in zip(starts, stops)])
    return (k[idx] / (n - 1)) * d, s[1:-1][idx]


def _ep_loss_np(surface, dist, za, zb, wavelength):
    out = np.zeros(surface.shape[0])
    for li in range(surface.shape[0]):
        pos, top = _edges_np(surface[li], dist[li], za[li], zb[li])
        if pos.size == 0:
            continue
        xs = np.concatenate(([0.0], pos, [dist[li]]))
        zs = np.concatenate(([za[li]], top, [zb[li]]))
        d1 = xs[1:-1] - xs[:-2]
        d2 = xs[2:] - xs[1:-1]
        ok = (d1 > 0) & (d2 > 0)
        d1, d2 = d1[ok], d2[ok]
        chord = zs[:-2][ok] + (d1 / (d1 + d2)) * (zs[2:][ok] - zs[:-2][ok])
        h = zs[1:-1][ok] - chord
        v = h * np.sqrt(2.0 * (d1 + d2) / (wavelength[li] * d1 * d2))
        j = 6.9 + 20.0 * np.log10(np.sqrt((v - 0.1) ** 2 + 1.0) + v - 0.1)
        out[li] = float(np.sum(np.where(v > -0.78, j, 0.0)))
    return out


NUMBA_KERNELS = {
    "bilinear": _bilinear_nb,
    "im2col": _im2col_nb,
    "col2im": _col2im_nb,
    "maxpool_fwd": _maxpool_fwd_nb,
    "maxpool_bwd": _maxpool_bwd_nb,
    "ep_loss": _ep_loss_nb,
}
NUMPY_KERNELS = {
    "bilinear": _bilinear_np,
    "im2col": _im2col_np,
    "col2im": _col2im_np,
    "maxpool_fwd": _maxpool_fwd_np,
    "maxpool_bwd": _maxpool_bwd_np,
    "ep_loss": _ep_loss_np,
}
ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

bilinear = ACTIVE["bilinear"]
im2col = ACTIVE["im2col"]
col2im = ACTIVE["col2im"]
maxpool_fwd = ACTIVE["maxpool_fwd"]
maxpool_bwd = ACTIVE["maxpool_bwd"]
ep_loss = ACTIVE["ep_loss"]

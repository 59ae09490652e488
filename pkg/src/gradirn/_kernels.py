"""Hot inner loops: bilinear warping, sampled image gradients, Hausdorff.

Every kernel has a numba ``@njit`` implementation and a pure-numpy twin with
identical semantics.  The numba path is used when numba imports cleanly and
``GRADIRN_NUMBA`` is not set to ``0``.  Both paths accumulate in a fixed order,
so results are deterministic for a given backend.

Sampling convention shared by all warp kernels: pixel ``(i, j)`` samples the
image at ``(i + d0, j + d1)``.  Coordinates are clamped to ``[0, n - 1]`` per
axis; on a clamped axis the derivative w.r.t. the displacement is zero.  The
cell index is capped at ``n - 2`` so that a coordinate sitting exactly on the
last row/column uses the cell below it.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("GRADIRN_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# pure numpy path
# ---------------------------------------------------------------------------

def _axis_coords(raw, n):
    """Clamp sample coordinates along one axis; return (i0, i1, frac, mask)."""
    if n == 1:
        zeros = np.zeros(raw.shape, dtype=np.intp)
        return zeros, zeros, np.zeros_like(raw), np.zeros_like(raw)
    inside = (raw >= 0) & (raw <= n - 1)
    c = np.clip(raw, 0, n - 1)
    i0 = np.minimum(np.floor(c).astype(np.intp), n - 2)
    return i0, i0 + 1, c - i0, inside.astype(raw.dtype)


def _coords(disp):
    _, h, w = disp.shape
    ii, jj = np.indices((h, w))
    y0, y1, fy, my = _axis_coords(ii + disp[0], h)
    x0, x1, fx, mx = _axis_coords(jj + disp[1], w)
    return y0, y1, fy, my, x0, x1, fx, mx


def _scatter(shape, flat_idx, values):
    c, h, w = shape
    out = np.empty(shape, dtype=values.dtype)
    for k in range(c):
        out[k] = np.bincount(flat_idx.ravel(), weights=values[k].ravel(),
                             minlength=h * w).reshape(h, w)
    return out


def _np_warp_forward(img, disp):
    y0, y1, fy, _, x0, x1, fx, _ = _coords(disp)
    i00, i01, i10, i11 = img[:, y0, x0], img[:, y0, x1], img[:, y1, x0], img[:, y1, x1]
    return ((1 - fy) * ((1 - fx) * i00 + fx * i01) + fy * ((1 - fx) * i10 + fx * i11)).astype(img.dtype)


def _np_warp_backward(img, disp, g):
    c, h, w = img.shape
    y0, y1, fy, my, x0, x1, fx, mx = _coords(disp)
    i00, i01, i10, i11 = img[:, y0, x0], img[:, y0, x1], img[:, y1, x0], img[:, y1, x1]
    gy = ((1 - fx) * (i10 - i00) + fx * (i11 - i01)) * my
    gx = ((1 - fy) * (i01 - i00) + fy * (i11 - i10)) * mx
    gdisp = np.stack([(g * gy).sum(0), (g * gx).sum(0)]).astype(img.dtype)
    idx = np.concatenate([(y0 * w + x0)[None], (y0 * w + x1)[None],
                          (y1 * w + x0)[None], (y1 * w + x1)[None]])
    wts = np.concatenate([((1 - fy) * (1 - fx))[None], ((1 - fy) * fx)[None],
                          (fy * (1 - fx))[None], (fy * fx)[None]])
    vals = np.concatenate([g[:, None] * wts[None, k:k + 1] for k in range(4)], axis=1)
    gimg = _scatter((c, h, w), np.transpose(idx, (1, 2, 0)),
                    np.transpose(vals, (0, 2, 3, 1)).reshape(c, h, w * 4))
    return gimg.astype(img.dtype), gdisp


def _np_sampled_grad_forward(img, disp):
    c, h, w = img.shape
    y0, y1, fy, my, x0, x1, fx, mx = _coords(disp)
    i00, i01, i10, i11 = img[:, y0, x0], img[:, y0, x1], img[:, y1, x0], img[:, y1, x1]
    out = np.empty((2 * c, h, w), dtype=img.dtype)
    out[0::2] = ((1 - fx) * (i10 - i00) + fx * (i11 - i01)) * my
    out[1::2] = ((1 - fy) * (i01 - i00) + fy * (i11 - i10)) * mx
    return out


def _np_sampled_grad_backward(img, disp, g):
    c, h, w = img.shape
    y0, y1, fy, my, x0, x1, fx, mx = _coords(disp)
    i00, i01, i10, i11 = img[:, y0, x0], img[:, y0, x1], img[:, y1, x0], img[:, y1, x1]
    gy_up, gx_up = g[0::2], g[1::2]
    cross = (i11 - i10 - i01 + i00) * (my * mx)
    gdisp = np.stack([(gx_up * cross).sum(0), (gy_up * cross).sum(0)]).astype(img.dtype)
    a, b = gy_up * my, gx_up * mx
    # coefficients of the four corners in d/dy and d/dx of the interpolant
    w00 = -a * (1 - fx) - b * (1 - fy)
    w01 = -a * fx + b * (1 - fy)
    w10 = a * (1 - fx) - b * fy
    w11 = a * fx + b * fy
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
    vals = np.stack([w00, w01, w10, w11], axis=-1).reshape(c, h, w * 4)
    gimg = _scatter((c, h, w), idx, vals)
    return gimg.astype(img.dtype), gdisp


def _np_directed_hausdorff(a, b):
    best = 0.0
    for start in range(0, len(a), 512):
        chunk = a[start:start + 512]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.min(axis=1).max()))
    return float(np.sqrt(best))


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if USE_NUMBA:

    @njit(cache=True, inline="always")
    def _nb_axis(raw, n):
        if n == 1:
            return 0, 0, 0.0, 0.0
        m = 1.0 if (raw >= 0.0 and raw <= n - 1) else 0.0
        c = min(max(raw, 0.0), n - 1.0)
        i0 = min(int(np.floor(c)), n - 2)
        return i0, i0 + 1, c - i0, m

    @njit(cache=True)
    def _nb_warp_forward(img, disp):
        c, h, w = img.shape
        out = np.empty_like(img)
        for i in range(h):
            for j in range(w):
                y0, y1, fy, _ = _nb_axis(i + disp[0, i, j], h)
                x0, x1, fx, _ = _nb_axis(j + disp[1, i, j], w)
                for k in range(c):
                    out[k, i, j] = ((1 - fy) * ((1 - fx) * img[k, y0, x0] + fx * img[k, y0, x1])
                                    + fy * ((1 - fx) * img[k, y1, x0] + fx * img[k, y1, x1]))
        return out

    @njit(cache=True)
    def _nb_warp_backward(img, disp, g):
        c, h, w = img.shape
        gimg = np.zeros_like(img)
        gdisp = np.zeros((2, h, w), dtype=img.dtype)
        for i in range(h):
            for j in range(w):
                y0, y1, fy, my = _nb_axis(i + disp[0, i, j], h)
                x0, x1, fx, mx = _nb_axis(j + disp[1, i, j], w)
                for k in range(c):
                    gk = g[k, i, j]
                    i00 = img[k, y0, x0]
                    i01 = img[k, y0, x1]
                    i10 = img[k, y1, x0]
                    i11 = img[k, y1, x1]
                    gdisp[0, i, j] += gk * ((1 - fx) * (i10 - i00) + fx * (i11 - i01)) * my
                    gdisp[1, i, j] += gk * ((1 - fy) * (i01 - i00) + fy * (i11 - i10)) * mx
                    gimg[k, y0, x0] += gk * (1 - fy) * (1 - fx)
                    gimg[k, y0, x1] += gk * (1 - fy) * fx
                    gimg[k, y1, x0] += gk * fy * (1 - fx)
                    gimg[k, y1, x1] += gk * fy * fx
        return gimg, gdisp

    @njit(cache=True)
    def _nb_sampled_grad_forward(img, disp):
        c, h, w = img.shape
        out = np.empty((2 * c, h, w), dtype=img.dtype)
        for i in range(h):
            for j in range(w):
                y0, y1, fy, my = _nb_axis(i + disp[0, i, j], h)
                x0, x1, fx, mx = _nb_axis(j + disp[1, i, j], w)
                for k in range(c):
                    i00 = img[k, y0, x0]
                    i01 = img[k, y0, x1]
                    i10 = img[k, y1, x0]
                    i11 = img[k, y1, x1]
                    out[2 * k, i, j] = ((1 - fx) * (i10 - i00) + fx * (i11 - i01)) * my
                    out[2 * k + 1, i, j] = ((1 - fy) * (i01 - i00) + fy * (i11 - i10)) * mx
        return out

    @njit(cache=True)
    def _nb_sampled_grad_backward(img, disp, g):
        c, h, w = img.shape
        gimg = np.zeros_like(img)
        gdisp = np.zeros((2, h, w), dtype=img.dtype)
        for i in range(h):
            for j in range(w):
                y0, y1, fy, my = _nb_axis(i + disp[0, i, j], h)
                x0, x1, fx, mx = _nb_axis(j + disp[1, i, j], w)
                for k in range(c):
                    a = g[2 * k, i, j] * my
                    b = g[2 * k + 1, i, j] * mx
                    cross = (img[k, y1, x1] - img[k, y1, x0] - img[k, y0, x1] + img[k, y0, x0]) * my * mx
                    gdisp[0, i, j] += g[2 * k + 1, i, j] * cross
                    gdisp[1, i, j] += g[2 * k, i, j] * cross
                    gimg[k, y0, x0] += -a * (1 - fx) - b * (1 - fy)
                    gimg[k, y0, x1] += -a * fx + b * (1 - fy)
                    gimg[k, y1, x0] += a * (1 - fx) - b * fy
                    gimg[k, y1, x1] += a * fx + b * fy
        return gimg, gdisp

    @njit(cache=True)
    def _nb_directed_hausdorff(a, b):
        best = 0.0
        for p in range(a.shape[0]):
            nearest = np.inf
            for q in range(b.shape[0]):
                dy = a[p, 0] - b[q, 0]
                dx = a[p, 1] - b[q, 1]
                d2 = dy * dy + dx * dx
                if d2 < nearest:
                    nearest = d2
                    if nearest <= best:
                        break
            if nearest > best:
                best = nearest
        return np.sqrt(best)


def _c(a):
    return np.ascontiguousarray(a)


def warp_forward(img, disp):
    if USE_NUMBA:
        return _nb_warp_forward(_c(img), _c(disp))
    return _np_warp_forward(img, disp)


def warp_backward(img, disp, g):
    if USE_NUMBA:
        return _nb_warp_backward(_c(img), _c(disp), _c(g))
    return _np_warp_backward(img, disp, g)


def sampled_grad_forward(img, disp):
    if USE_NUMBA:
        return _nb_sampled_grad_forward(_c(img), _c(disp))
    return _np_sampled_grad_forward(img, disp)


def sampled_grad_backward(img, disp, g):
    if USE_NUMBA:
        return _nb_sampled_grad_backward(_c(img), _c(disp), _c(g))
    return _np_sampled_grad_backward(img, disp, g)


def directed_hausdorff(a, b):
    """max over points of ``a`` of the distance to the nearest point of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if USE_NUMBA:
        return float(_nb_directed_hausdorff(_c(a), _c(b)))
    return _np_directed_hausdorff(a, b)


BACKENDS = {
    "numpy": {
        "warp_forward": _np_warp_forward,
        "warp_backward": _np_warp_backward,
        "sampled_grad_forward": _np_sampled_grad_forward,
        "sampled_grad_backward": _np_sampled_grad_backward,
        "directed_hausdorff": lambda a, b: _np_directed_hausdorff(
            np.asarray(a, np.float64), np.asarray(b, np.float64)),
    },
}
if USE_NUMBA:
    BACKENDS["numba"] = {
        "warp_forward": lambda i, d: _nb_warp_forward(_c(i), _c(d)),
        "warp_backward": lambda i, d, g: _nb_warp_backward(_c(i), _c(d), _c(g)),
        "sampled_grad_forward": lambda i, d: _nb_sampled_grad_forward(_c(i), _c(d)),
        "sampled_grad_backward": lambda i, d, g: _nb_sampled_grad_backward(_c(i), _c(d), _c(g)),
        "directed_hausdorff": lambda a, b: float(_nb_directed_hausdorff(
            _c(np.asarray(a, np.float64)), _c(np.asarray(b, np.float64)))),
    }

"""Differentiable spatial primitives on ``[C, H, W]`` tensors."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .tensor import ShapeMismatchError, Tensor, TensorError, make


def _check_chw(op, t: Tensor):
    if t.data.ndim != 3:
        raise TensorError(f"{op}: expected a [C, H, W] tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# convolution / activation
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    _check_chw("conv2d", x)
    c_out, c_in, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise TensorError(f"conv2d: only 3x3 kernels are supported, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ShapeMismatchError("conv2d channels", x.shape, weight.shape)
    if bias.shape != (c_out,):
        raise ShapeMismatchError("conv2d bias", bias.shape, (c_out,))
    _, h, w = x.shape
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    # rows ordered (c_in, ki, kj) to match weight.reshape(c_out, -1)
    cols = sliding_window_view(padded, (h, w), axis=(1, 2)).reshape(c_in * 9, h * w)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, h, w) + bias.data[:, None, None]

    def vjp(g):
        g2 = g.reshape(c_out, h * w)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c_in, 3, 3, h, w)
            gpad = np.zeros_like(padded)
            for ki in range(3):
                for kj in range(3):
                    gpad[:, ki:ki + h, kj:kj + w] += gcols[:, ki, kj]
            gx = gpad[:, 1:-1, 1:-1]
        return gx, gw, gb

    return make("conv2d", out, (x, weight, bias), vjp)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0 < slope < 1:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    s = x.dtype.type(slope)
    factor = np.where(x.data >= 0, x.dtype.type(1), s)
    return make("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# resolution changes
# ---------------------------------------------------------------------------

def avg_pool2(x: Tensor) -> Tensor:
    _check_chw("avg_pool2", x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise TensorError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def vjp(g):
        q = g * g.dtype.type(0.25)
        return (np.repeat(np.repeat(q, 2, axis=1), 2, axis=2),)

    return make("avg_pool2", out, (x,), vjp)


@lru_cache(maxsize=32)
def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Interpolation matrix mapping n samples to 2n: output k reads coordinate k/2.

    Even outputs coincide with inputs; the last output is clamped onto the
    last input, so both corner samples are preserved.
    """
    m = np.zeros((2 * n, n), dtype=dtype)
    for k in range(2 * n):
        pos = min(k / 2, n - 1)
        i0 = int(np.floor(pos))
        frac = pos - i0
        m[k, i0] += 1 - frac
        if frac > 0:
            m[k, i0 + 1] += frac
    m.flags.writeable = False
    return m


def upsample_linear2(x: Tensor, value_scale: float = 1.0) -> Tensor:
    """Bilinear x2 upsampling followed by multiplication with ``value_scale``."""
    _check_chw("upsample_linear2", x)
    _, h, w = x.shape
    uh = _upsample_matrix(h, x.dtype)
    uw = _upsample_matrix(w, x.dtype)
    s = x.dtype.type(value_scale)
    out = (uh @ x.data @ uw.T) * s
    return make("upsample_linear2", out, (x,), lambda g: ((uh.T @ g @ uw) * s,))


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def _check_warp(op, image: Tensor, disp: Tensor):
    _check_chw(op, image)
    if disp.data.ndim != 3 or disp.shape[0] != 2 or disp.shape[1:] != image.shape[1:]:
        raise ShapeMismatchError(op, image.shape, disp.shape)
    if image.dtype != disp.dtype:
        raise TensorError(f"{op}: dtype mismatch {image.dtype} vs {disp.dtype}")


def warp_bilinear(image: Tensor, disp: Tensor) -> Tensor:
    """Sample ``image`` at ``x + disp(x)`` with bilinear weights and border clamping.

    ``disp[0]`` displaces along rows, ``disp[1]`` along columns, in pixels.
    """
    _check_warp("warp_bilinear", image, disp)
    out = _kernels.warp_forward(image.data, disp.data)

    def vjp(g):
        gimg, gdisp = _kernels.warp_backward(image.data, disp.data, g)
        return gimg, gdisp

    return make("warp_bilinear", out, (image, disp), vjp)


def sampled_gradient(image: Tensor, disp: Tensor) -> Tensor:
    """Spatial derivative of the bilinear interpolant of ``image`` at ``x + disp(x)``.

    Returns ``[2C, H, W]`` ordered ``(d/drow, d/dcol)`` per image channel.  This
    is exactly ``d warp_bilinear(image, disp)(x) / d disp(x)``, zero on clamped
    axes.
    """
    _check_warp("sampled_gradient", image, disp)
    out = _kernels.sampled_grad_forward(image.data, disp.data)

    def vjp(g):
        return _kernels.sampled_grad_backward(image.data, disp.data, g)

    return make("sampled_gradient", out, (image, disp), vjp)


# ---------------------------------------------------------------------------
# finite differences / local sums
# ---------------------------------------------------------------------------

def _diff_axis(f: np.ndarray, axis: int) -> np.ndarray:
    out = np.empty_like(f)
    n = f.shape[axis]
    lo = [slice(None)] * f.ndim
    hi = [slice(None)] * f.ndim

    def at(sl, idx):
        s = list(sl)
        s[axis] = idx
        return tuple(s)

    out[at(lo, slice(1, -1))] = (f[at(hi, slice(2, None))] - f[at(hi, slice(None, -2))]) * f.dtype.type(0.5)
    out[at(lo, 0)] = f[at(hi, 1)] - f[at(hi, 0)]
    out[at(lo, n - 1)] = f[at(hi, n - 1)] - f[at(hi, n - 2)]
    return out


def _diff_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of :func:`_diff_axis`."""
    n = g.shape[axis]
    g = np.moveaxis(g, axis, 0)
    out = np.zeros_like(g)
    half = g.dtype.type(0.5)
    # interior rows: out[i+1] += g[i]/2, out[i-1] -= g[i]/2
    out[2:] += g[1:-1] * half
    out[:-2] -= g[1:-1] * half
    out[1] += g[0]
    out[0] -= g[0]
    out[n - 1] += g[n - 1]
    out[n - 2] -= g[n - 1]
    return np.moveaxis(out, 0, axis)


def central_differences(f: np.ndarray) -> np.ndarray:
    """``[C, H, W] -> [2C, H, W]``, ordered ``(d/drow, d/dcol)`` per channel."""
    c, h, w = f.shape
    if h < 2 or w < 2:
        raise TensorError(f"spatial gradient needs H, W >= 2, got {h}x{w}")
    out = np.empty((2 * c, h, w), dtype=f.dtype)
    out[0::2] = _diff_axis(f, 1)
    out[1::2] = _diff_axis(f, 2)
    return out


def central_differences_adjoint(g: np.ndarray) -> np.ndarray:
    return _diff_axis_adjoint(g[0::2], 1) + _diff_axis_adjoint(g[1::2], 2)


def spatial_gradient_central(x: Tensor) -> Tensor:
    """Central differences inside, one-sided differences on the border."""
    _check_chw("spatial_gradient_central", x)
    out = central_differences(x.data)
    return make("spatial_gradient_central", out, (x,),
                lambda g: (central_differences_adjoint(g),))


def _box(a: np.ndarray, window: int) -> np.ndarray:
    # separable direct sums; cumsum differences lose too much precision in float32
    r = window // 2
    p = np.pad(a, ((0, 0), (r, r), (0, 0)))
    rows = sliding_window_view(p, window, axis=1).sum(axis=-1)
    p = np.pad(rows, ((0, 0), (0, 0), (r, r)))
    return sliding_window_view(p, window, axis=2).sum(axis=-1).astype(a.dtype, copy=False)


def box_sum(x: Tensor, window: int) -> Tensor:
    """Sum over a ``window x window`` neighbourhood; out-of-grid cells count as zero."""
    _check_chw("box_sum", x)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"box_sum window must be odd and positive, got {window}")
    return make("box_sum", _box(x.data, window), (x,), lambda g: (_box(g, window),))

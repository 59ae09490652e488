"""Image dissimilarities and their gradients w.r.t. the displacement field.

Every dissimilarity is 0 at perfect alignment and is minimised.  The
gradient w.r.t. the displacement is assembled from tape primitives as

    dD/dphi(x) = dD/dwarped(x) * d warped(x) / d phi(x)

where the first factor has a closed form per metric and the second is the
derivative of the bilinear interpolant at the sample point
(:func:`~gradirn.functional.sampled_gradient`).  The result is therefore
itself differentiable, which is what lets training backpropagate through
explicit dissimilarity-gradient steps without second-order machinery.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor, clamp_min, concat, mean, mul, scale, sqrt, square, sub
from .tensor import ShapeMismatchError
from .transform import DisplacementField

VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class SimilarityKind:
    name: str = "ssd"
    window: int = 9

    def __post_init__(self):
        if self.name not in ("ssd", "ncc-global", "ncc-local"):
            raise ValueError(f"unknown similarity {self.name!r}")
        if self.name == "ncc-local" and (self.window < 3 or self.window % 2 == 0):
            raise ValueError(f"local NCC window must be odd and >= 3, got {self.window}")

    @classmethod
    def ssd(cls):
        return cls("ssd")

    @classmethod
    def ncc_global(cls):
        return cls("ncc-global")

    @classmethod
    def ncc_local(cls, window: int = 9):
        return cls("ncc-local", window)

    def to_dict(self):
        return {"name": self.name, "window": self.window}


SSD = SimilarityKind.ssd()
NCC_GLOBAL = SimilarityKind.ncc_global()


def _check(warped: Tensor, fixed: Tensor):
    if warped.shape != fixed.shape:
        raise ShapeMismatchError("dissimilarity", warped.shape, fixed.shape)


def _const(value, like: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=like.dtype))


# -- global NCC -------------------------------------------------------------

def _global_terms(warped, fixed):
    wc = sub(warped, mean(warped))
    fc = sub(fixed, mean(fixed))
    cov = mean(mul(wc, fc))
    vw_raw, vf_raw = mean(square(wc)), mean(square(fc))
    return wc, fc, cov, vw_raw, vf_raw


def _ncc_global(warped, fixed):
    _, _, cov, vw, vf = _global_terms(warped, fixed)
    ncc = cov / sqrt(mul(clamp_min(vw, VAR_FLOOR), clamp_min(vf, VAR_FLOOR)))
    return 1.0 - ncc


def _ncc_global_dwarped(warped, fixed):
    n = warped.size
    wc, fc, cov, vw_raw, vf_raw = _global_terms(warped, fixed)
    vw, vf = clamp_min(vw_raw, VAR_FLOOR), clamp_min(vf_raw, VAR_FLOOR)
    inv = 1.0 / sqrt(mul(vw, vf))
    active = _const(float(vw_raw.data >= VAR_FLOOR), warped)
    b = mul(mul(cov, inv) / vw, active)
    return scale(mul(wc, b) - mul(fc, inv), 1.0 / n)


# -- local NCC --------------------------------------------------------------

def _local_terms(warped, fixed, window):
    count = _const(F._box(np.ones(warped.shape, dtype=warped.dtype), window), warped)
    s_i = F.box_sum(warped, window)
    s_j = F.box_sum(fixed, window)
    mean_i, mean_j = s_i / count, s_j / count
    cross = F.box_sum(mul(warped, fixed), window) - mul(s_i, mean_j)
    ivar_raw = F.box_sum(square(warped), window) - mul(s_i, mean_i)
    jvar_raw = F.box_sum(square(fixed), window) - mul(s_j, mean_j)
    return mean_i, mean_j, cross, ivar_raw, jvar_raw


def _ncc_local(warped, fixed, window):
    _, _, cross, ivar, jvar = _local_terms(warped, fixed, window)
    cc = cross / sqrt(mul(clamp_min(ivar, VAR_FLOOR), clamp_min(jvar, VAR_FLOOR)))
    return 1.0 - mean(cc)


def _ncc_local_dwarped(warped, fixed, window):
    n = warped.size
    mean_i, mean_j, cross, ivar_raw, jvar_raw = _local_terms(warped, fixed, window)
    ivar, jvar = clamp_min(ivar_raw, VAR_FLOOR), clamp_min(jvar_raw, VAR_FLOOR)
    a = 1.0 / sqrt(mul(ivar, jvar))
    active = _const((ivar_raw.data >= VAR_FLOOR).astype(warped.dtype), warped)
    # d cc_p / d ivar_p = -cross_p / (2 ivar_p) * a_p
    b = mul(scale(mul(cross, a) / ivar, -0.5), active)
    box = lambda t: F.box_sum(t, window)  # noqa: E731
    total = (mul(fixed, box(a)) - box(mul(a, mean_j))
             + scale(mul(warped, box(b)) - box(mul(b, mean_i)), 2.0))
    return scale(total, -1.0 / n)


# -- public API -------------------------------------------------------------

def dissimilarity(kind: SimilarityKind, warped: Tensor, fixed: Tensor) -> Tensor:
    """Scalar dissimilarity: mean squared difference, or 1 - NCC."""
    _check(warped, fixed)
    if kind.name == "ssd":
        return mean(square(sub(warped, fixed)))
    if kind.name == "ncc-global":
        return _ncc_global(warped, fixed)
    return _ncc_local(warped, fixed, kind.window)


def dissimilarity_wrt_warped(kind: SimilarityKind, warped: Tensor, fixed: Tensor) -> Tensor:
    """Closed-form ``dD/dwarped`` as a differentiable ``[1, H, W]`` tensor."""
    _check(warped, fixed)
    if kind.name == "ssd":
        return scale(sub(warped, fixed), 2.0 / warped.size)
    if kind.name == "ncc-global":
        return _ncc_global_dwarped(warped, fixed)
    return _ncc_local_dwarped(warped, fixed, kind.window)


def dissimilarity_gradient(kind: SimilarityKind, moving: Tensor, fixed: Tensor,
                           d: DisplacementField, *, with_value: bool = False):
    """``dD(warp(moving, d), fixed) / d d`` as a ``[2, H, W]`` tensor.

    With ``with_value=True`` returns ``(gradient, dissimilarity)`` sharing the warp.
    """
    if moving.shape != fixed.shape:
        raise ShapeMismatchError("dissimilarity_gradient", moving.shape, fixed.shape)
    warped = F.warp_bilinear(moving, d.grid)
    dw = dissimilarity_wrt_warped(kind, warped, fixed)
    grad = mul(concat([dw, dw]), F.sampled_gradient(moving, d.grid))
    if with_value:
        return grad, dissimilarity(kind, warped, fixed)
    return grad


def pixel_count(t: Tensor) -> int:
    return int(np.prod(t.shape[-2:]))


"""Dense displacement fields: resampling, composition and Jacobian analysis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import ShapeMismatchError, Tensor, TensorError, add, concat, default_dtype


class NonFiniteFieldError(TensorError, FloatingPointError):
    pass


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel displacement ``[2, H, W]`` in pixels of its own grid.

    ``level`` counts resolution levels from the coarsest (0).
    """

    grid: Tensor
    level: int = 0

    def __post_init__(self):
        if self.grid.data.ndim != 3 or self.grid.shape[0] != 2:
            raise TensorError(f"displacement field must be [2, H, W], got {self.grid.shape}")

    @property
    def shape(self):
        return self.grid.shape[1:]

    def numpy(self) -> np.ndarray:
        return self.grid.data

    def check_finite(self, where: str = "") -> None:
        if not np.all(np.isfinite(self.grid.data)):
            raise NonFiniteFieldError(f"non-finite displacement{(' ' + where) if where else ''}")

    @classmethod
    def zeros(cls, shape, level: int = 0, dtype=None) -> "DisplacementField":
        h, w = shape
        return cls(Tensor(np.zeros((2, h, w), dtype=dtype or default_dtype())), level)


@dataclass(frozen=True)
class JacobianStats:
    folding_fraction: float
    std_log_jac: float
    min_det: float

    @property
    def folding_percent(self) -> float:
        return 100.0 * self.folding_fraction

    def to_dict(self) -> dict:
        return {"folding_fraction": self.folding_fraction,
                "folding_percent": self.folding_percent,
                "std_log_jac": self.std_log_jac,
                "min_det": self.min_det}


def _as_array(d) -> np.ndarray:
    if isinstance(d, DisplacementField):
        return d.grid.data
    if isinstance(d, Tensor):
        return d.data
    return np.asarray(d)


def jacobian_determinant(d) -> np.ndarray:
    """det(I + grad u) per pixel as an ``[1, H, W]`` array (analysis only, no tape)."""
    u = _as_array(d)
    if u.shape[1] < 3 or u.shape[2] < 3:
        raise TensorError(f"jacobian_determinant needs H, W >= 3, got {u.shape[1:]}")
    g = F.central_differences(u.astype(np.float64))
    # g = [du0/drow, du0/dcol, du1/drow, du1/dcol]
    det = (1 + g[0]) * (1 + g[3]) - g[1] * g[2]
    return det[None]


def jacobian_stats(d, eps: float = 1e-6) -> JacobianStats:
    if eps <= 0:
        raise ValueError("eps must be positive")
    det = jacobian_determinant(d)[0, 1:-1, 1:-1]
    folded = np.count_nonzero(det <= 0)
    return JacobianStats(
        folding_fraction=folded / det.size,
        std_log_jac=float(np.std(np.log(np.maximum(det, eps)))),
        min_det=float(det.min()),
    )


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Field of ``x -> x + inner(x) + outer(x + inner(x))`` (differentiable)."""
    if outer.grid.shape != inner.grid.shape:
        raise ShapeMismatchError("compose", outer.grid.shape, inner.grid.shape)
    resampled = F.warp_bilinear(outer.grid, inner.grid)
    return DisplacementField(add(inner.grid, resampled), inner.level)


def upsample_field(d: DisplacementField) -> DisplacementField:
    """Double the grid; displacement values are rescaled to the finer pixel units."""
    return DisplacementField(F.upsample_linear2(d.grid, 2.0), d.level + 1)


def warp_image(image: Tensor, d: DisplacementField) -> Tensor:
    return F.warp_bilinear(image, d.grid)


def stack_field(row: Tensor, col: Tensor, level: int = 0) -> DisplacementField:
    return DisplacementField(concat([row, col]), level)

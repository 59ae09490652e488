"""Diffusion penalty and the learned CNN regulariser step."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import Parameter, ShapeMismatchError, Tensor, concat, default_dtype, scale, square
from .tensor import sum as tsum
from .transform import DisplacementField

CHANNELS = 32
IN_CHANNELS = 4
OUT_CHANNELS = 2
N_LAYERS = 5
LEAKY_SLOPE = 0.2


def diffusion_penalty(d: DisplacementField) -> Tensor:
    """Mean over pixels of the squared central-difference gradient norm."""
    h, w = d.shape
    return scale(tsum(square(F.spatial_gradient_central(d.grid))), 1.0 / (h * w))


def diffusion_gradient(d: DisplacementField) -> Tensor:
    """Analytic gradient of :func:`diffusion_penalty` (no tape).

    ``(2/|Omega|) G^T G u`` where ``G`` is the central-difference operator; i.e.
    minus the discrete Laplacian consistent with that operator, replicate-type
    one-sided rows at the border.
    """
    u = d.grid.data
    h, w = d.shape
    lap = F.central_differences_adjoint(F.central_differences(u))
    return Tensor(lap * u.dtype.type(2.0 / (h * w)), dtype=u.dtype)


def _layer_shapes():
    shapes = [(CHANNELS, IN_CHANNELS, 3, 3)]
    shapes += [(CHANNELS, CHANNELS, 3, 3)] * (N_LAYERS - 2)
    shapes.append((OUT_CHANNELS, CHANNELS, 3, 3))
    return shapes


def cnn_param_count() -> int:
    return sum(int(np.prod(s)) + s[0] for s in _layer_shapes())


@dataclass
class RegularizerCNN:
    """Five 3x3 conv layers, LeakyReLU after the first four."""

    level: int
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    slope: float = LEAKY_SLOPE

    @classmethod
    def init(cls, level: int, rng: np.random.Generator, dtype=None, zero_last: bool = True):
        dtype = dtype or default_dtype()
        net = cls(level)
        shapes = _layer_shapes()
        for k, shape in enumerate(shapes, start=1):
            fan_in = shape[1] * 9
            if k == len(shapes) and zero_last:
                wv = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / ((1 + LEAKY_SLOPE ** 2) * fan_in))
                wv = rng.uniform(-bound, bound, size=shape)
            net.weights.append(Parameter(f"cnn{level}.layer{k}.weight", wv, dtype=dtype))
            net.biases.append(Parameter(f"cnn{level}.layer{k}.bias", np.zeros(shape[0]), dtype=dtype))
        return net

    def parameters(self) -> list[Parameter]:
        out = []
        for wt, b in zip(self.weights, self.biases):
            out += [wt, b]
        return out

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for k, (wt, b) in enumerate(zip(self.weights, self.biases)):
            x = F.conv2d(x, wt, b)
            if k < last:
                x = F.leaky_relu(x, self.slope)
        return x


def cnn_step(net: RegularizerCNN, d: DisplacementField, moving: Tensor, fixed: Tensor) -> Tensor:
    """Learned regulariser gradient for the current field and image pair."""
    if moving.shape != (1, *d.shape) or fixed.shape != moving.shape:
        raise ShapeMismatchError("cnn_step", d.grid.shape, moving.shape)
    return net(concat([d.grid, moving, fixed]))

"""Multi-resolution unrolled gradient descent (the network forward pass).

Each update step moves the displacement ``phi`` against the sum of an
explicit dissimilarity gradient and a learned regulariser step::

    phi <- phi - tau_t * (grad_D(phi) + cnn_n(phi, moving_n, fixed_n))

``tau_t`` is indexed globally over all steps; one CNN is shared by the steps
of a resolution level.  Levels run coarse to fine and the field is upsampled
(values doubled) between levels.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import functional as F
from .regularizer import RegularizerCNN, cnn_step, diffusion_gradient
from .similarity import SSD, SimilarityKind, dissimilarity, dissimilarity_gradient
from .tensor import Parameter, Tensor, TensorError, add, default_dtype, mul, no_tape, scale, sub
from .transform import (DisplacementField, JacobianStats, NonFiniteFieldError, compose,
                        jacobian_stats, upsample_field)


class Variant(str, enum.Enum):
    VN = "vn"
    VN_NOGRAD = "vn-nograd"
    RC_CNN = "rc-cnn"
    PLAIN_GD = "plain-gd"

    @property
    def learnable(self) -> bool:
        return self is not Variant.PLAIN_GD


@dataclass(frozen=True)
class RegistrationConfig:
    variant: Variant = Variant.VN
    levels: int = 3
    steps_per_level: int = 3
    similarity: SimilarityKind = SSD
    lam: float = 0.05
    alpha: float = 0.0
    plain_gd_step: float = 1e-2
    # "pixel": dissimilarity gradient as a per-pixel density (|Omega_n| * dD/dphi),
    # "mean": the raw gradient of the mean-normalised dissimilarity
    grad_units: str = "pixel"
    dump_intermediate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.levels < 1 or self.steps_per_level < 1:
            raise ValueError("levels and steps_per_level must be >= 1")
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("lambda and alpha must be nonnegative")
        if self.grad_units not in ("pixel", "mean"):
            raise ValueError(f"unknown grad_units {self.grad_units!r}")

    @property
    def total_steps(self) -> int:
        return self.levels * self.steps_per_level

    def check_image_shape(self, shape) -> None:
        f = 2 ** (self.levels - 1)
        h, w = shape[-2:]
        if h % f or w % f:
            raise ValueError(f"image sides {h}x{w} must be divisible by 2^(levels-1) = {f}")

    def with_(self, **kw) -> "RegistrationConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "levels": self.levels,
                "steps_per_level": self.steps_per_level,
                "similarity": self.similarity.to_dict(), "lambda": self.lam,
                "alpha": self.alpha, "plain_gd_step": self.plain_gd_step,
                "grad_units": self.grad_units}

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        return cls(variant=Variant(d["variant"]), levels=int(d["levels"]),
                   steps_per_level=int(d["steps_per_level"]),
                   similarity=SimilarityKind(**d["similarity"]), lam=float(d["lambda"]),
                   alpha=float(d.get("alpha", 0.0)),
                   plain_gd_step=float(d.get("plain_gd_step", 1e-2)),
                   grad_units=d.get("grad_units", "pixel"))


@dataclass
class RegistrationParams:
    cnns: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)

    @classmethod
    def init(cls, cfg: RegistrationConfig, seed: int = 0, dtype=None,
             tau_init: float = 1.0) -> "RegistrationParams":
        dtype = dtype or default_dtype()
        rng = np.random.default_rng(seed)
        cnns = [RegularizerCNN.init(n, rng, dtype) for n in range(cfg.levels)]
        taus = [Parameter(f"tau.{t}", tau_init, dtype=dtype) for t in range(1, cfg.total_steps + 1)]
        return cls(cnns, taus)

    def parameters(self) -> list[Parameter]:
        out = []
        for net in self.cnns:
            out += net.parameters()
        return out + list(self.step_sizes)

    def named(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "RegistrationParams":
        nets = []
        for net in self.cnns:
            nets.append(RegularizerCNN(net.level,
                                       [Parameter(p.name, p.data) for p in net.weights],
                                       [Parameter(p.name, p.data) for p in net.biases], net.slope))
        return RegistrationParams(nets, [Parameter(p.name, p.data) for p in self.step_sizes])


def count_parameters(params: RegistrationParams) -> int:
    return int(sum(p.size for p in params.parameters()))


@dataclass
class TrajectoryStep:
    step: int
    level: int
    field: np.ndarray
    dissimilarity: float


@dataclass
class TrajectoryDump:
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def dissimilarities(self) -> list[float]:
        return [s.dissimilarity for s in self.steps]


def build_pyramid(image: Tensor, levels: int) -> list[Tensor]:
    """Average-pooled pyramid ordered coarse to fine (the input is last)."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    f = 2 ** (levels - 1)
    if image.shape[-2] % f or image.shape[-1] % f:
        raise ValueError(f"image sides {image.shape[-2:]} not divisible by {f}")
    out = [image]
    for _ in range(levels - 1):
        out.append(F.avg_pool2(out[-1]))
    return out[::-1]


def _dissim_value(kind, moving, fixed, phi: DisplacementField) -> float:
    with no_tape():
        return float(dissimilarity(kind, F.warp_bilinear(moving, phi.grid), fixed).data)


def _step(cfg, params, t, level, phi, mov, fix):
    v = cfg.variant
    units = float(mov.shape[-1] * mov.shape[-2]) if cfg.grad_units == "pixel" else 1.0
    if v is Variant.RC_CNN:
        warped = F.warp_bilinear(mov, phi.grid)
        delta = DisplacementField(cnn_step(params.cnns[level], phi, warped, fix), level)
        return compose(phi, delta)
    if v is Variant.PLAIN_GD:
        g = dissimilarity_gradient(cfg.similarity, mov, fix, phi)
        if cfg.alpha:
            g = add(g, scale(diffusion_gradient(phi), cfg.alpha))
        return DisplacementField(sub(phi.grid, scale(g, cfg.plain_gd_step * units)), level)
    r = cnn_step(params.cnns[level], phi, mov, fix)
    if v is Variant.VN:
        g = scale(dissimilarity_gradient(cfg.similarity, mov, fix, phi), units)
        r = add(g, r)
    return DisplacementField(sub(phi.grid, mul(params.step_sizes[t], r)), level)


def forward_register(moving: Tensor, fixed: Tensor, params: RegistrationParams | None,
                     cfg: RegistrationConfig):
    """Run the unrolled optimisation; returns ``(phi_star, trajectory or None)``.

    Records onto the active tape when one is open.
    """
    if moving.shape != fixed.shape:
        raise ValueError(f"moving {moving.shape} and fixed {fixed.shape} differ in shape")
    cfg.check_image_shape(moving.shape)
    if cfg.variant.learnable and params is None:
        raise ValueError(f"variant {cfg.variant.value} needs parameters")
    if params is not None and cfg.variant.learnable and (
            len(params.cnns) != cfg.levels or len(params.step_sizes) != cfg.total_steps):
        raise ValueError("parameters do not match the configured levels/steps")
    movs = build_pyramid(moving, cfg.levels)
    fixs = build_pyramid(fixed, cfg.levels)
    phi = DisplacementField.zeros(movs[0].shape[1:], level=0, dtype=moving.dtype)
    dump = TrajectoryDump() if cfg.dump_intermediate else None
    if dump is not None:
        dump.steps.append(TrajectoryStep(0, 0, phi.numpy().copy(),
                                         _dissim_value(cfg.similarity, movs[0], fixs[0], phi)))
    t = 0
    for level in range(cfg.levels):
        if level > 0:
            phi = upsample_field(phi)
        for _ in range(cfg.steps_per_level):
            phi = _step(cfg, params, t, level, phi, movs[level], fixs[level])
            t += 1
            if not np.all(np.isfinite(phi.grid.data)):
                raise NonFiniteFieldError(f"non-finite displacement after step {t} at level {level}")
            if dump is not None:
                dump.steps.append(TrajectoryStep(
                    t, level, phi.numpy().copy(),
                    _dissim_value(cfg.similarity, movs[level], fixs[level], phi)))
    return phi, dump


@dataclass
class RegistrationResult:
    warped: Tensor
    field: DisplacementField
    jacobian: JacobianStats
    dissimilarity_before: float
    dissimilarity_after: float
    trajectory: TrajectoryDump | None = None
    seconds: float = 0.0


def register_pair(moving: Tensor, fixed: Tensor, params: RegistrationParams | None,
                  cfg: RegistrationConfig) -> RegistrationResult:
    """Inference: register one pair without recording a tape."""
    start = time.perf_counter()
    with no_tape():
        phi, dump = forward_register(moving, fixed, params, cfg)
        warped = F.warp_bilinear(moving, phi.grid)
        before = float(dissimilarity(cfg.similarity, moving, fixed).data)
        after = float(dissimilarity(cfg.similarity, warped, fixed).data)
    if phi.shape[0] < 3 or phi.shape[1] < 3:
        raise TensorError("images must be at least 3x3 for Jacobian analysis")
    stats = jacobian_stats(phi)
    return RegistrationResult(warped, phi, stats, before, after, dump,
                              time.perf_counter() - start)

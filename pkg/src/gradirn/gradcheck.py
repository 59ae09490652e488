"""Finite-difference oracle suite for every differentiable piece, in float64.

Primitives are checked entry by entry against central differences of a random
linear functional of their output.  Composites (the explicit dissimilarity
gradient, the diffusion gradient, the end-to-end training gradient) are
checked against differences of the scalar they claim to differentiate.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .regularizer import diffusion_gradient, diffusion_penalty
from .registration import RegistrationConfig, RegistrationParams, Variant, forward_register
from .similarity import SimilarityKind, dissimilarity, dissimilarity_gradient
from .tensor import Parameter, Tape, Tensor, no_tape, precision
from .transform import DisplacementField

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
EPS = 1e-6
KINK_RETRIES = 5
KINK_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    kind: str
    rel_error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < self.tolerance)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "rel_error": self.rel_error,
                "tolerance": self.tolerance, "passed": self.passed, "seconds": self.seconds}


def rel_error(a, b) -> float:
    """max|a - b| / max(max|a|, max|b|); zero when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def numeric_gradient(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` at every entry of ``x``."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return g


def _op_check(name, op, arrays, rng, tol=PRIMITIVE_TOL) -> CheckResult:
    """Autodiff vs central differences of ``sum(w * op(*inputs))`` for every input."""
    start = time.perf_counter()
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with no_tape():
        out_shape = op(*[Tensor(a) for a in arrays]).shape
    w = rng.normal(size=out_shape)

    def value(*arrs):
        with no_tape():
            return float((op(*[Tensor(a) for a in arrs]).data * w).sum())

    params = [Parameter(f"in{i}", a) for i, a in enumerate(arrays)]
    with Tape() as tape:
        y = op(*params)
        tape.backward(T.sum(T.mul(y, Tensor(w))) if y.shape else T.mul(y, Tensor(w)))
    err = 0.0
    for i, p in enumerate(params):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return value(*args)
        err = max(err, rel_error(p.grad, numeric_gradient(f, arrays[i].copy())))
    kind = "primitive" if tol == PRIMITIVE_TOL else "composite"
    return CheckResult(name, kind, err, tol, time.perf_counter() - start)


def _interior_disp(rng, shape, amp=1.3):
    # generic non-integer displacements; the interpolant has kinks at integer coordinates
    d = rng.uniform(-amp, amp, size=(2, *shape))
    return d + 0.05 * np.sign(d - np.round(d)) * (np.abs(d - np.round(d)) < 0.05)


def primitive_checks(rng) -> list[CheckResult]:
    c, h, w = 2, 5, 6
    a = rng.normal(size=(c, h, w))
    b = rng.normal(size=(c, h, w))
    pos = rng.uniform(0.5, 2.0, size=(c, h, w))
    s = rng.normal(size=())
    img = rng.uniform(0, 1, size=(1, 6, 6))
    disp = _interior_disp(rng, (6, 6))
    x4 = rng.normal(size=(3, 4, 4))
    wt = rng.normal(size=(2, 3, 3, 3))
    bias = rng.normal(size=(2,))
    nz = rng.normal(size=(c, h, w))
    nz = nz + 0.1 * np.sign(nz)  # keep away from the activation kink
    checks = [
        ("add", T.add, [a, b]), ("add-scalar", T.add, [a, s]),
        ("sub", T.sub, [a, b]), ("mul", T.mul, [a, b]), ("mul-scalar", T.mul, [s, a]),
        ("div", T.div, [a, pos]), ("div-scalar", T.div, [a, np.float64(1.7) + s * 0]),
        ("neg", T.neg, [a]), ("square", T.square, [a]),
        ("scale", lambda x: T.scale(x, -0.37), [a]),
        ("sqrt", T.sqrt, [pos]),
        ("clamp_min", lambda x: T.clamp_min(x, 0.0), [nz]),
        ("sum", T.sum, [a]), ("mean", T.mean, [a]),
        ("concat", lambda x, y: T.concat([x, y]), [a, b]),
        ("channels", lambda x: T.channels(x, slice(1, 2)), [a]),
        ("conv2d", F.conv2d, [x4, wt, bias]),
        ("leaky_relu", lambda x: F.leaky_relu(x, 0.2), [nz]),
        ("avg_pool2", F.avg_pool2, [rng.normal(size=(2, 4, 6))]),
        ("upsample_linear2", lambda x: F.upsample_linear2(x, 2.0), [rng.normal(size=(2, 3, 4))]),
        ("warp_bilinear", F.warp_bilinear, [img, disp]),
        ("sampled_gradient", F.sampled_gradient, [img, disp]),
        ("spatial_gradient_central", F.spatial_gradient_central, [a]),
        ("box_sum", lambda x: F.box_sum(x, 3), [a]),
    ]
    return [_op_check(name, op, arrs, rng) for name, op, arrs in checks]


def _dissim_of_field(kind, moving, fixed):
    def f(d):
        with no_tape():
            return float(dissimilarity(kind, F.warp_bilinear(moving, Tensor(d)), fixed).data)
    return f


def composite_checks(rng) -> list[CheckResult]:
    out = []
    n = 10
    yy, xx = np.indices((n, n))
    base = np.sin(yy / 2.1) * np.cos(xx / 2.7) + 0.3 * rng.normal(size=(n, n))
    moving = Tensor(base[None])
    fixed = Tensor((np.roll(base, 1, axis=0) + 0.1 * rng.normal(size=(n, n)))[None])
    disp = 0.8 * _interior_disp(rng, (n, n))
    kinds = [SimilarityKind.ssd(), SimilarityKind.ncc_global(), SimilarityKind.ncc_local(5)]
    for kind in kinds:
        start = time.perf_counter()
        with no_tape():
            g = dissimilarity_gradient(kind, moving, fixed, DisplacementField(Tensor(disp))).data
        num = numeric_gradient(_dissim_of_field(kind, moving, fixed), disp.copy())
        out.append(CheckResult(f"dissimilarity_gradient[{kind.name}]", "composite",
                               rel_error(g, num), COMPOSITE_TOL, time.perf_counter() - start))
    start = time.perf_counter()
    u = rng.normal(size=(2, 7, 8))

    def pen(x):
        with no_tape():
            return float(diffusion_penalty(DisplacementField(Tensor(x))).data)
    g = diffusion_gradient(DisplacementField(Tensor(u))).data
    out.append(CheckResult("diffusion_gradient", "composite",
                           rel_error(g, numeric_gradient(pen, u.copy())), COMPOSITE_TOL,
                           time.perf_counter() - start))
    for kind in kinds:
        # the scalar losses themselves through autodiff
        out.append(_op_check(f"dissimilarity[{kind.name}]", lambda w, f, k=kind: dissimilarity(k, w, f),
                             [moving.data, fixed.data], rng, COMPOSITE_TOL))
    return out


def _randomize_last_layers(params: RegistrationParams, rng, amp=0.05):
    for net in params.cnns:
        net.weights[-1].assign(rng.normal(0, amp, size=net.weights[-1].shape))
        net.biases[-1].assign(rng.normal(0, amp, size=net.biases[-1].shape))
    for tau in params.step_sizes:
        tau.assign(rng.uniform(0.5, 1.5))


def end_to_end_check(rng, variant: Variant = Variant.VN, size: int = 16) -> list[CheckResult]:
    """Directional derivative of the training loss along every parameter tensor."""
    from .training import loss

    cfg = RegistrationConfig(variant=variant, levels=2, steps_per_level=1)
    yy, xx = np.indices((size, size))
    blob = np.exp(-((yy - 7.3) ** 2 + (xx - 8.1) ** 2) / 18.0)
    moving = Tensor((blob + 0.05 * rng.normal(size=blob.shape))[None])
    shifted = np.exp(-((yy - 8.4) ** 2 + (xx - 7.2) ** 2) / 20.0)
    fixed = Tensor((shifted + 0.05 * rng.normal(size=blob.shape))[None])
    params = RegistrationParams.init(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    _randomize_last_layers(params, rng)
    lam = 0.05

    def total_loss():
        phi, _ = forward_register(moving, fixed, params, cfg)
        return loss(moving, fixed, phi, cfg.similarity, lam)

    params.zero_grad()
    with Tape() as tape:
        tape.backward(total_loss())
    results = []
    for p in params.parameters():
        start = time.perf_counter()
        orig = p.data.copy()
        for _ in range(KINK_RETRIES):
            v = rng.normal(size=p.shape)
            v /= np.sqrt((v ** 2).sum())
            vals = {}
            for k in (1, 0, -1):
                p.assign(orig + k * EPS * v)
                with no_tape():
                    vals[k] = float(total_loss().data)
            p.assign(orig)
            fwd, bwd = (vals[1] - vals[0]) / EPS, (vals[0] - vals[-1]) / EPS
            # one-sided slopes disagree: the probe straddles an activation or
            # interpolation kink, so the difference quotient is meaningless there
            if abs(fwd - bwd) <= KINK_TOL * max(abs(fwd), abs(bwd), 1e-12):
                break
        analytic = float((p.grad * v).sum())
        numeric = (vals[1] - vals[-1]) / (2 * EPS)
        results.append(CheckResult(f"end_to_end[{variant.value}].{p.name}", "composite",
                                   rel_error(analytic, numeric), COMPOSITE_TOL,
                                   time.perf_counter() - start))
    return results


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        results = primitive_checks(rng) + composite_checks(rng)
        for variant in (Variant.VN, Variant.VN_NOGRAD, Variant.RC_CNN):
            results += end_to_end_check(rng, variant)
    return results

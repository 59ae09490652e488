"""Outer optimisation: Adam on the unrolled forward pass, plus checkpoints."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from . import gtf
from .registration import (RegistrationConfig, RegistrationParams, Variant, count_parameters,
                           forward_register)
from .regularizer import RegularizerCNN, diffusion_penalty
from .similarity import dissimilarity
from .tensor import Parameter, Tape, Tensor, add, no_tape, scale
from .transform import DisplacementField

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size != 1:
            raise ValueError("epochs must be >= 0 and batch_size must be 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: list[Parameter]) -> "AdamState":
        return cls({p.name: np.zeros_like(p.data) for p in params},
                   {p.name: np.zeros_like(p.data) for p in params}, 0)


def loss(moving: Tensor, fixed: Tensor, phi: DisplacementField, kind, lam: float) -> Tensor:
    """Self-supervised loss: dissimilarity after warping plus ``lam`` x diffusion penalty."""
    warped = F.warp_bilinear(moving, phi.grid)
    return add(dissimilarity(kind, warped, fixed), scale(diffusion_penalty(phi), lam))


def trainable(params: RegistrationParams, cfg: RegistrationConfig) -> list[Parameter]:
    """Parameters the optimiser updates; step sizes are frozen for RC-CNN."""
    if cfg.variant is Variant.RC_CNN:
        return [p for net in params.cnns for p in net.parameters()]
    return params.parameters()


def adam_step(params: list[Parameter], state: AdamState, cfg: TrainConfig,
              clip_norm: float | None = None) -> None:
    """Bias-corrected Adam update in place; ``p.grad`` must be populated."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient for parameter {p.name}")
    factor = 1.0
    if clip_norm is not None:
        norm = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))
        if norm > clip_norm:
            factor = clip_norm / norm
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for p in params:
        g = p.grad * p.grad.dtype.type(factor) if factor != 1.0 else p.grad
        m = state.m[p.name] = b1 * state.m[p.name] + (1 - b1) * g
        v = state.v[p.name] = b2 * state.v[p.name] + (1 - b2) * g * g
        update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.assign(p.data - update.astype(p.data.dtype))


def sample_loss(sample, params, reg_cfg) -> float:
    with no_tape():
        phi, _ = forward_register(sample.moving, sample.fixed, params, reg_cfg)
        return float(loss(sample.moving, sample.fixed, phi, reg_cfg.similarity, reg_cfg.lam).data)


def validation_loss(dataset, params, reg_cfg) -> float:
    return float(np.mean([sample_loss(s, params, reg_cfg) for s in dataset]))


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs}


def train(dataset, cfg: TrainConfig, reg_cfg: RegistrationConfig, *,
          params: RegistrationParams | None = None, val_dataset=None,
          checkpoint_dir=None, progress=None):
    """Stochastic training (batch size 1) in seeded shuffled order.

    Returns ``(params, adam_state, log)``.
    """
    if not reg_cfg.variant.learnable:
        raise TrainingError("nothing to train: the plain-gd variant has no learnable parameters")
    dataset = list(dataset)
    if not dataset:
        raise TrainingError("training dataset is empty")
    shape = dataset[0].moving.shape
    for s in dataset:
        if s.moving.shape != shape or s.fixed.shape != shape:
            raise TrainingError(f"sample {s.id}: image shape differs from {shape}")
    reg_cfg.check_image_shape(shape)
    if params is None:
        params = RegistrationParams.init(reg_cfg, seed=cfg.seed, dtype=dataset[0].moving.dtype)
    opt_params = trainable(params, reg_cfg)
    state = AdamState.for_params(opt_params)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB1]))
    tlog = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        losses = []
        for idx in order_rng.permutation(len(dataset)):
            s = dataset[idx]
            params.zero_grad()
            with Tape() as tape:
                phi, _ = forward_register(s.moving, s.fixed, params, reg_cfg)
                value = loss(s.moving, s.fixed, phi, reg_cfg.similarity, reg_cfg.lam)
                tape.backward(value)
            adam_step(opt_params, state, cfg, cfg.clip_norm)
            losses.append(float(value.data))
        entry = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                 "seconds": time.perf_counter() - start}
        if val_dataset:
            entry["val_loss"] = validation_loss(val_dataset, params, reg_cfg)
        tlog.epochs.append(entry)
        log.info("epoch %d: loss %.6g (%.1fs)", epoch, entry["mean_loss"], entry["seconds"])
        if progress is not None:
            progress(entry)
        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"epoch-{epoch:04d}", params, state, cfg, reg_cfg)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, params, state, cfg, reg_cfg)
    return params, state, tlog


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: RegistrationParams, state: AdamState | None,
                    cfg: TrainConfig | None, reg_cfg: RegistrationConfig) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for p in params.parameters():
        tensors[p.name] = p.data
    if state is not None:
        for name in sorted(state.m):
            tensors[f"adam.m.{name}"] = state.m[name]
            tensors[f"adam.v.{name}"] = state.v[name]
    files = {}
    for name, arr in tensors.items():
        fname = f"{name}.gtf"
        gtf.write(arr, path / fname)
        files[name] = fname
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "registration": reg_cfg.to_dict(),
        "training": asdict(cfg) if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "adam_step": state.step if state is not None else 0,
        "param_count": count_parameters(params),
        "dtype": str(params.parameters()[0].dtype) if params.parameters() else None,
        "tensors": files,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, expect: RegistrationConfig | None = None):
    """Returns ``(params, adam_state, train_cfg, reg_cfg)``; validates shapes."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: unsupported checkpoint schema {manifest.get('schema')!r}")
    reg_cfg = RegistrationConfig.from_dict(manifest["registration"])
    if expect is not None and (expect.levels, expect.steps_per_level) != (reg_cfg.levels, reg_cfg.steps_per_level):
        raise CheckpointError(
            f"{path}: checkpoint has {reg_cfg.levels} levels x {reg_cfg.steps_per_level} steps, "
            f"expected {expect.levels} x {expect.steps_per_level}")
    files = manifest["tensors"]
    template = RegistrationParams.init(reg_cfg, seed=0, dtype=np.dtype(manifest.get("dtype") or "float32"))

    def load(name, shape):
        if name not in files:
            raise CheckpointError(f"{path}: missing tensor {name}")
        try:
            arr = gtf.read(path / files[name])
        except (OSError, gtf.GTFError) as exc:
            raise CheckpointError(f"{path}: cannot read {name}: {exc}") from exc
        if arr.shape != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} has shape {arr.shape}, expected {tuple(shape)}")
        return arr

    cnns = []
    for net in template.cnns:
        cnns.append(RegularizerCNN(
            net.level, [Parameter(p.name, load(p.name, p.shape)) for p in net.weights],
            [Parameter(p.name, load(p.name, p.shape)) for p in net.biases], net.slope))
    taus = [Parameter(p.name, load(p.name, p.shape)) for p in template.step_sizes]
    extra = set(n for n in files if not n.startswith("adam.")) - {p.name for p in template.parameters()}
    if extra:
        raise CheckpointError(f"{path}: tensors {sorted(extra)} do not match the configuration")
    params = RegistrationParams(cnns, taus)
    if manifest.get("param_count") not in (None, count_parameters(params)):
        raise CheckpointError(f"{path}: manifest declares {manifest['param_count']} parameters, "
                              f"found {count_parameters(params)}")
    state = AdamState(step=int(manifest.get("adam_step", 0)))
    for p in params.parameters():
        if f"adam.m.{p.name}" in files:
            state.m[p.name] = load(f"adam.m.{p.name}", p.shape)
            state.v[p.name] = load(f"adam.v.{p.name}", p.shape)
    tcfg = TrainConfig(**manifest["training"]) if manifest.get("training") else None
    return params, state, tcfg, reg_cfg

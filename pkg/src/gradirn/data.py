"""Synthetic registration pairs with ground-truth deformations, and dataset manifests."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels, gtf
from .evaluation import LabelMask, warp_labels_array
from .tensor import Tensor, default_dtype
from .transform import DisplacementField, jacobian_determinant

SCHEMA_VERSION = 1
NOISE_SIGMA = 0.01
MIN_DET = 0.1
MAX_HALVINGS = 10
TEXTURE_SIGMA = 1.5
TEXTURE_AMPLITUDE = 0.06
DEFORM_SCALE = 6.0
SMOOTHNESS = 16.0


class DatasetError(ValueError):
    pass


@dataclass
class SamplePair:
    id: str
    moving: Tensor
    fixed: Tensor
    moving_seg: LabelMask | None = None
    fixed_seg: LabelMask | None = None
    gt_disp: DisplacementField | None = None


@dataclass
class RawPair:
    """Arrays exactly as generated / stored on disk."""

    id: str
    moving: np.ndarray
    fixed: np.ndarray
    moving_seg: np.ndarray
    fixed_seg: np.ndarray
    gt_disp: np.ndarray


def normalize(img: np.ndarray) -> np.ndarray:
    """Min-max normalise to [0, 1]; constant images map to zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi - lo <= 0:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _image(arr) -> Tensor:
    return Tensor(normalize(arr)[None], dtype=default_dtype())


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def pair_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Per-pair generator derived by counter, so parallel generation cannot change content."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def _ellipse_radius(size, center, radii, angle):
    ii, jj = np.indices((size, size), dtype=np.float64)
    y, x = ii - center[0], jj - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * y + s * x, -s * y + c * x
    return np.sqrt((u / radii[0]) ** 2 + (v / radii[1]) ** 2)


def _soft(r, radii, edge=0.7):
    # approximate signed distance in pixels -> smooth occupancy
    sd = (r - 1.0) * min(radii)
    return 1.0 / (1.0 + np.exp(np.clip(sd / edge, -50, 50)))


def _phantom(rng: np.random.Generator, size: int):
    s = float(size)
    texture = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=s / 12, mode="wrap")
    texture /= texture.std() + 1e-12
    img = 0.12 + 0.05 * texture
    labels = np.zeros((size, size), dtype=np.uint8)

    def paint(center, radii, angle, value, label=None):
        nonlocal img
        r = _ellipse_radius(size, center, radii, angle)
        m = _soft(r, radii)
        img = img * (1 - m) + value * m
        if label is not None:
            labels[r < 1.0] = label

    centre = s / 2 + rng.uniform(-0.05, 0.05, 2) * s
    # unlabelled body outline
    paint(centre, (rng.uniform(0.36, 0.42) * s, rng.uniform(0.40, 0.46) * s),
          rng.uniform(0, np.pi), 0.35 + 0.05 * rng.uniform(-1, 1))
    lv_c = centre + rng.uniform(-0.06, 0.06, 2) * s
    lv_r = np.array([rng.uniform(0.07, 0.11), rng.uniform(0.07, 0.11)]) * s
    angle = rng.uniform(0, np.pi)
    thick = rng.uniform(0.035, 0.055) * s
    if rng.random() < 0.6:
        offset = (lv_r.max() + thick + 0.07 * s) * np.array([np.sin(angle), np.cos(angle)])
        paint(lv_c + offset, (rng.uniform(0.05, 0.08) * s, rng.uniform(0.1, 0.14) * s), angle,
              0.75, label=3)
    paint(lv_c, lv_r + thick, angle, 0.55, label=2)
    paint(lv_c, lv_r, angle, 0.92, label=1)
    if rng.random() < 0.5:
        theta = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.24, 0.3) * s
        paint(centre + dist * np.array([np.sin(theta), np.cos(theta)]),
              (rng.uniform(0.04, 0.06) * s, rng.uniform(0.04, 0.06) * s), rng.uniform(0, np.pi),
              0.05, label=4)
    # faint tissue texture everywhere so flat regions still carry alignment signal
    grain = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=TEXTURE_SIGMA, mode="wrap")
    img = img + TEXTURE_AMPLITUDE * grain / (grain.std() + 1e-12)
    return img, labels


def _gt_field(rng: np.random.Generator, size: int, deform_scale: float, smoothness: float):
    raw = rng.normal(size=(2, size, size))
    if deform_scale == 0:
        return np.zeros((2, size, size))
    smooth = np.stack([ndimage.gaussian_filter(c, sigma=smoothness, mode="reflect") for c in raw])
    mag = np.sqrt((smooth ** 2).sum(0)).max()
    field = smooth * (deform_scale / mag)
    for _ in range(MAX_HALVINGS + 1):
        if jacobian_determinant(field)[0, 1:-1, 1:-1].min() > MIN_DET:
            return field
        field = field * 0.5
    raise DatasetError(f"deformation too aggressive after {MAX_HALVINGS} halvings "
                       f"(deform_scale={deform_scale}, smoothness={smoothness})")


def synth_pair(seed: int, size: int = 64, deform_scale: float = DEFORM_SCALE,
               smoothness: float = SMOOTHNESS,
               *, stream: int = 0, index: int = 0, pair_id: str | None = None) -> RawPair:
    if size < 32 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 32, got {size}")
    if deform_scale < 0:
        raise ValueError("deform_scale must be nonnegative")
    rng = pair_rng(seed, stream, index)
    base, labels = _phantom(rng, size)
    field = _gt_field(rng, size, deform_scale, smoothness)
    warped = _kernels.warp_forward(base[None], field)[0]
    fixed_labels = warp_labels_array(labels, field)
    moving = np.clip(base + rng.normal(0, NOISE_SIGMA, base.shape), 0, 1)
    fixed = np.clip(warped + rng.normal(0, NOISE_SIGMA, base.shape), 0, 1)
    return RawPair(pair_id or f"pair-{index:04d}", moving.astype(np.float32), fixed.astype(np.float32),
                   labels, fixed_labels.astype(np.uint8), field.astype(np.float32))


def to_sample(raw: RawPair) -> SamplePair:
    return SamplePair(
        raw.id,
        _image(raw.moving),
        _image(raw.fixed),
        LabelMask.from_array(raw.moving_seg),
        LabelMask.from_array(raw.fixed_seg),
        DisplacementField(Tensor(raw.gt_disp, dtype=default_dtype())),
    )


SPLIT_STREAMS = {"train": 0, "val": 1, "test": 2}


def synth_dataset(out_dir, num_pairs: int, size: int = 64, seed: int = 0,
                  deform_scale: float = DEFORM_SCALE, smoothness: float = SMOOTHNESS,
                  val_frac: float = 0.0, test_pairs: int = 0) -> Path:
    """Write GTF files and ``manifest.json``; returns the manifest path.

    ``num_pairs`` is split into train and validation by ``val_frac``; ``test_pairs``
    extra held-out pairs are added.  Each split draws from its own seed stream.
    """
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    if not 0 <= val_frac < 1:
        raise ValueError("val_frac must lie in [0, 1)")
    if test_pairs < 0:
        raise ValueError("test_pairs must be >= 0")
    out = Path(out_dir)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    n_val = int(round(num_pairs * val_frac))
    counts = {"train": num_pairs - n_val, "val": n_val, "test": test_pairs}
    plan = [(split, i) for split, n in counts.items() for i in range(n)]
    entries = []
    for split, i in plan:
        stream = SPLIT_STREAMS[split]
        pid = f"{split}-{i:04d}"
        raw = synth_pair(seed, size, deform_scale, smoothness, stream=stream, index=i, pair_id=pid)
        files = {}
        for key in ("moving", "fixed", "moving_seg", "fixed_seg", "gt_disp"):
            rel = f"pairs/{pid}.{key}.gtf"
            gtf.write(getattr(raw, key), out / rel)
            files[key] = rel
        entries.append({"id": pid, "split": split, **files})
    manifest = {
        "schema": SCHEMA_VERSION,
        "generator": {"seed": seed, "num_pairs": num_pairs, "size": size,
                      "deform_scale": deform_scale, "smoothness": smoothness,
                      "val_frac": val_frac, "test_pairs": test_pairs,
                      "noise_sigma": NOISE_SIGMA},
        "samples": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _manifest_path(path) -> Path:
    p = Path(path)
    return p / "manifest.json" if p.is_dir() else p


def load_dataset(path, split: str | None = None) -> list[SamplePair]:
    """Load samples from a manifest (or its directory), optionally one split."""
    mpath = _manifest_path(path)
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"no manifest at {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: invalid JSON ({exc})") from exc
    if manifest.get("schema") != SCHEMA_VERSION:
        raise DatasetError(f"{mpath}: unsupported schema {manifest.get('schema')!r}")
    root = mpath.parent
    samples, seen = [], set()
    for entry in manifest.get("samples", []):
        if split is not None and entry.get("split", "train") != split:
            continue
        pid = entry.get("id")
        if not pid or pid in seen:
            raise DatasetError(f"{mpath}: missing or duplicate sample id {pid!r}")
        seen.add(pid)
        for key in ("moving", "fixed"):
            if key not in entry:
                raise DatasetError(f"{mpath}: sample {pid} lacks {key!r}")

        def load(key):
            rel = entry.get(key)
            if rel is None:
                return None
            if os.path.isabs(rel):
                raise DatasetError(f"{mpath}: absolute path for {pid}.{key}")
            p = root / rel
            if not p.exists():
                raise DatasetError(f"{mpath}: missing file {rel}")
            return gtf.read(p)

        mov, fix = load("moving"), load("fixed")
        if mov.shape != fix.shape:
            raise DatasetError(f"{pid}: moving {mov.shape} and fixed {fix.shape} differ")
        mseg, fseg, gt = load("moving_seg"), load("fixed_seg"), load("gt_disp")
        for name, arr in (("moving_seg", mseg), ("fixed_seg", fseg)):
            if arr is not None and arr.shape != mov.shape:
                raise DatasetError(f"{pid}: {name} shape {arr.shape} != image shape {mov.shape}")
        if gt is not None and gt.shape != (2, *mov.shape):
            raise DatasetError(f"{pid}: gt_disp shape {gt.shape} != {(2, *mov.shape)}")
        samples.append(SamplePair(
            pid, _image(mov), _image(fix),
            LabelMask.from_array(mseg) if mseg is not None else None,
            LabelMask.from_array(fseg) if fseg is not None else None,
            DisplacementField(Tensor(gt, dtype=default_dtype())) if gt is not None else None))
    if not samples:
        raise DatasetError(f"{mpath}: no samples{f' in split {split!r}' if split else ''}")
    return samples


def load_image(path) -> Tensor:
    """Load a GTF or 8-bit PGM image as a normalised ``[1, H, W]`` tensor."""
    path = str(path)
    arr = gtf.read_pgm(path) if path.lower().endswith(".pgm") else gtf.read(path)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DatasetError(f"{path}: expected a 2D image, got shape {arr.shape}")
    return _image(arr)

"""Segmentation overlap, boundary distance and deformation regularity metrics."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabelMask:
    grid: np.ndarray
    labels: tuple

    def __post_init__(self):
        present = set(int(v) for v in np.unique(self.grid)) - {0}
        if not present <= set(self.labels):
            raise ValueError(f"labels {sorted(present - set(self.labels))} missing from label set")

    @classmethod
    def from_array(cls, grid) -> "LabelMask":
        grid = np.asarray(grid)
        if grid.ndim == 3 and grid.shape[0] == 1:
            grid = grid[0]
        grid = grid.astype(np.uint8)
        return cls(grid, tuple(int(v) for v in np.unique(grid) if v != 0))


def warp_labels_array(grid: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Nearest-neighbour sampling of ``grid`` at ``x + disp(x)`` with border clamp."""
    h, w = grid.shape
    if disp.shape != (2, h, w):
        raise ValueError(f"label grid {grid.shape} and displacement {disp.shape} differ")
    ii, jj = np.indices((h, w))
    y = np.clip(np.floor(ii + disp[0] + 0.5), 0, h - 1).astype(np.intp)
    x = np.clip(np.floor(jj + disp[1] + 0.5), 0, w - 1).astype(np.intp)
    return grid[y, x]


def warp_labels(mask: LabelMask, d) -> LabelMask:
    disp = d.numpy() if hasattr(d, "numpy") else np.asarray(d)
    return LabelMask(warp_labels_array(mask.grid, np.asarray(disp)), mask.labels)


def dice(a: LabelMask, b: LabelMask, label: int) -> float:
    if a.grid.shape != b.grid.shape:
        raise ValueError(f"mask shapes differ: {a.grid.shape} vs {b.grid.shape}")
    ma, mb = a.grid == label, b.grid == label
    na, nb = int(ma.sum()), int(mb.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / (na + nb)


def boundary_points(grid: np.ndarray, label: int) -> np.ndarray:
    """Labelled pixels with at least one 4-neighbour unlabelled or off-grid."""
    m = np.pad(grid == label, 1, constant_values=False)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return np.argwhere(core & ~interior)


def hausdorff(a: LabelMask, b: LabelMask, label: int, percentile: float = 100.0) -> float:
    """Symmetric Hausdorff distance in pixels between the label boundaries.

    ``percentile < 100`` gives the percentile variant (e.g. HD95) of the pooled
    directed distances.
    """
    pa, pb = boundary_points(a.grid, label), boundary_points(b.grid, label)
    if len(pa) == 0:
        raise ValueError(f"hausdorff: label {label} is empty in the first mask")
    if len(pb) == 0:
        raise ValueError(f"hausdorff: label {label} is empty in the second mask")
    if percentile >= 100:
        return max(_kernels.directed_hausdorff(pa, pb), _kernels.directed_hausdorff(pb, pa))
    pa, pb = pa.astype(np.float64), pb.astype(np.float64)
    dab = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1))
    return float(np.percentile(np.concatenate([dab.min(1), dab.min(0)]), percentile))


# ---------------------------------------------------------------------------
# dataset evaluation
# ---------------------------------------------------------------------------

@dataclass
class PairRecord:
    id: str
    dice: dict
    hd: dict
    initial_dice: dict
    initial_hd: dict
    folding_percent: float
    std_log_jac: float
    min_det: float
    endpoint_error: float | None
    initial_endpoint_error: float | None
    dissimilarity_before: float
    dissimilarity_after: float
    seconds: float

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    @property
    def mean_initial_dice(self) -> float:
        return float(np.mean(list(self.initial_dice.values())))

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "id": self.id,
            "dice": {str(k): v for k, v in self.dice.items()},
            "hd": {str(k): v for k, v in self.hd.items()},
            "initial_dice": {str(k): v for k, v in self.initial_dice.items()},
            "initial_hd": {str(k): v for k, v in self.initial_hd.items()},
            "mean_dice": self.mean_dice,
            "mean_initial_dice": self.mean_initial_dice,
            "folding_percent": self.folding_percent,
            "std_log_jac": self.std_log_jac,
            "min_det": self.min_det,
            "endpoint_error": self.endpoint_error,
            "initial_endpoint_error": self.initial_endpoint_error,
            "dissimilarity_before": self.dissimilarity_before,
            "dissimilarity_after": self.dissimilarity_after,
        }
        if include_timing:
            out["seconds"] = self.seconds
        return out


def _mean_std(values) -> dict:
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def aggregate(self, include_timing: bool = True) -> dict:
        """Reduction of the per-pair records; deterministic apart from timing."""
        recs = sorted(self.records, key=lambda r: r.id)
        labels = sorted({int(k) for r in recs for k in r.dice})
        per_label = {}
        for lab in labels:
            per_label[str(lab)] = {
                "dice": _mean_std(r.dice.get(lab) for r in recs),
                "hd": _mean_std(r.hd.get(lab) for r in recs),
                "initial_dice": _mean_std(r.initial_dice.get(lab) for r in recs),
                "initial_hd": _mean_std(r.initial_hd.get(lab) for r in recs),
            }
        out = {
            "num_pairs": len(recs),
            "num_skipped": len(self.skipped),
            "per_label": per_label,
            "mean_dice": _mean_std(r.mean_dice for r in recs),
            "mean_initial_dice": _mean_std(r.mean_initial_dice for r in recs),
            "mean_hd": _mean_std(np.mean(list(r.hd.values())) if r.hd else None for r in recs),
            "mean_initial_hd": _mean_std(
                np.mean(list(r.initial_hd.values())) if r.initial_hd else None for r in recs),
            "folding_percent": _mean_std(r.folding_percent for r in recs),
            "std_log_jac": _mean_std(r.std_log_jac for r in recs),
            "endpoint_error": _mean_std(r.endpoint_error for r in recs),
            "initial_endpoint_error": _mean_std(r.initial_endpoint_error for r in recs),
        }
        if include_timing:
            out["seconds"] = _mean_std(r.seconds for r in recs)
        return out

    def to_dict(self, include_timing: bool = True) -> dict:
        """JSON-ready report; without timing it is a pure function of the inputs."""
        return {"records": [r.to_dict(include_timing) for r in sorted(self.records, key=lambda r: r.id)],
                "skipped": sorted(self.skipped),
                "aggregate": self.aggregate(include_timing)}


def _label_metrics(warped: LabelMask, fixed: LabelMask, percentile: float):
    labels = sorted(set(warped.labels) | set(fixed.labels))
    d, h = {}, {}
    for lab in labels:
        d[lab] = dice(warped, fixed, lab)
        try:
            h[lab] = hausdorff(warped, fixed, lab, percentile)
        except ValueError:
            pass  # label vanished on one side: Dice already records it
    return d, h


def evaluate_pair(sample, params, reg_cfg, percentile: float = 100.0) -> PairRecord:
    from .registration import register_pair

    res = register_pair(sample.moving, sample.fixed, params, reg_cfg)
    phi = res.field.numpy().astype(np.float64)
    warped_seg = warp_labels(sample.moving_seg, phi)
    dsc, hd = _label_metrics(warped_seg, sample.fixed_seg, percentile)
    dsc0, hd0 = _label_metrics(sample.moving_seg, sample.fixed_seg, percentile)
    epe = epe0 = None
    if sample.gt_disp is not None:
        gt = sample.gt_disp.numpy().astype(np.float64)
        epe = float(np.sqrt(((phi - gt) ** 2).sum(0)).mean())
        epe0 = float(np.sqrt((gt ** 2).sum(0)).mean())
    return PairRecord(sample.id, dsc, hd, dsc0, hd0, res.jacobian.folding_percent,
                      res.jacobian.std_log_jac, res.jacobian.min_det, epe, epe0,
                      res.dissimilarity_before, res.dissimilarity_after, res.seconds)


def evaluate_dataset(dataset, params, reg_cfg, *, percentile: float = 100.0,
                     threads: int | None = None) -> EvalReport:
    """Register every pair, warp its moving mask, and collect metrics.

    Parallelism is capped by ``threads`` or ``GRADIRN_THREADS`` (default 1);
    records are reduced in sample-id order either way.
    """
    if threads is None:
        threads = int(os.environ.get("GRADIRN_THREADS", "1") or 1)
    usable = [s for s in dataset if s.moving_seg is not None and s.fixed_seg is not None]
    report = EvalReport(skipped=[s.id for s in dataset if s.moving_seg is None or s.fixed_seg is None])
    if report.skipped:
        log.warning("skipping %d samples without segmentation masks", len(report.skipped))
    start = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            report.records = list(pool.map(lambda s: evaluate_pair(s, params, reg_cfg, percentile), usable))
    else:
        report.records = [evaluate_pair(s, params, reg_cfg, percentile) for s in usable]
    log.info("evaluated %d pairs in %.1fs", len(report.records), time.perf_counter() - start)
    return report

"""Segmentation metrics: Dice, Jaccard, HD95 and ASD (both distances in mm)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .sdf import boundary_mask, squared_edt

UNDEFINED = float("nan")


@dataclass
class ClassMetrics:
    dice: float
    jaccard: float
    hd95: float = UNDEFINED
    asd: float = UNDEFINED


@dataclass
class MetricReport:
    per_class: dict[int, ClassMetrics]
    spacing: tuple[float, ...]
    mean: ClassMetrics = field(init=False)

    def __post_init__(self):
        self.mean = mean_metrics(self.per_class.values())

    def as_dict(self) -> dict:
        return {
            "spacing": list(self.spacing),
            "per_class": {str(c): asdict(m) for c, m in self.per_class.items()},
            "mean": asdict(self.mean),
        }


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else UNDEFINED


def mean_metrics(items) -> ClassMetrics:
    """Average over classes, skipping undefined surface metrics."""
    items = list(items)
    return ClassMetrics(
        dice=_nanmean(m.dice for m in items),
        jaccard=_nanmean(m.jaccard for m in items),
        hd95=_nanmean(m.hd95 for m in items),
        asd=_nanmean(m.asd for m in items),
    )


def overlap_metrics(pred: np.ndarray, ref: np.ndarray, class_id: int) -> tuple[float, float]:
    """(dice, jaccard) of one class. A class absent from both scores 1.0."""
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    p = pred == class_id
    r = ref == class_id
    inter = int(np.count_nonzero(p & r))
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(r))
    if total == 0:
        return 1.0, 1.0
    union = total - inter
    return 2.0 * inter / total, inter / union


def _directed(src_bnd, dst_bnd, spacing):
    dist = np.sqrt(squared_edt(dst_bnd, spacing))
    return dist[src_bnd]


def surface_distances(pred_mask, ref_mask, spacing):
    """Directed boundary-to-boundary distances (pred->ref, ref->pred)."""
    bp = boundary_mask(pred_mask)
    br = boundary_mask(ref_mask)
    return _directed(bp, br, spacing), _directed(br, bp, spacing)


def surface_metrics(pred: np.ndarray, ref: np.ndarray, class_id: int, spacing) -> tuple[float, float]:
    """(hd95, asd) of one class; NaN when the class is empty in either mask."""
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    p = pred == class_id
    r = ref == class_id
    if not p.any() or not r.any():
        return UNDEFINED, UNDEFINED
    d_pr, d_rp = surface_distances(p, r, tuple(float(s) for s in spacing))
    return _hd95_asd(d_pr, d_rp)


def _hd95_asd(d_pr, d_rp):
    hd95 = max(float(np.percentile(d_pr, 95)), float(np.percentile(d_rp, 95)))
    asd = float(np.concatenate([d_pr, d_rp]).mean())
    return hd95, asd


def oracle_surface_metrics(pred, ref, class_id, spacing):
    """Brute-force all-pairs version of :func:`surface_metrics`."""
    p = pred == class_id
    r = ref == class_id
    if not p.any() or not r.any():
        return UNDEFINED, UNDEFINED
    sp = np.asarray(spacing, dtype=float)
    cp = np.argwhere(boundary_mask(p)) * sp
    cr = np.argwhere(boundary_mask(r)) * sp
    d = np.sqrt(((cp[:, None, :] - cr[None, :, :]) ** 2).sum(-1))
    return _hd95_asd(d.min(axis=1), d.min(axis=0))


def evaluate(pred: np.ndarray, ref: np.ndarray, num_classes: int, spacing,
             include_background: bool = False) -> MetricReport:
    """Per-class metrics; background (class 0) is skipped unless requested."""
    classes = range(0 if include_background else 1, num_classes)
    per_class = {}
    for c in classes:
        dice, jac = overlap_metrics(pred, ref, c)
        hd95, asd = surface_metrics(pred, ref, c, spacing)
        per_class[c] = ClassMetrics(dice, jac, hd95, asd)
    return MetricReport(per_class, tuple(float(s) for s in spacing))

"""Training objectives: Dice + SDF regression, uncertainty-weighted
consistency, the per-stage combinations and the Gaussian warm-up."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .networks import StudentOutput
from .tensor import Tensor
from .uncertainty import FusedPrediction

DICE_EPS = 1e-5
LAMBDA_MAX = 0.1


@dataclass
class LossBreakdown:
    supervised_seg: float
    supervised_sdf: float
    consistency_seg: float
    consistency_sdf: float
    total: float
    lambda_value: float
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)
    parts: dict = field(default_factory=dict, repr=False, compare=False)

    def row(self) -> dict:
        return {
            "supervised_seg": self.supervised_seg,
            "supervised_sdf": self.supervised_sdf,
            "consistency_seg": self.consistency_seg,
            "consistency_sdf": self.consistency_sdf,
            "total": self.total,
            "lambda": self.lambda_value,
        }


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(b, *spatial) integer labels -> (b, C, *spatial)."""
    labels = np.asarray(labels)
    eye = np.eye(num_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, 1)


def dice_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """1 - mean_c soft Dice with sums pooled over the whole batch, background included.

    Pooling keeps slices without foreground from dragging every foreground
    probability to zero, which per-sample Dice does on 2D batches.
    """
    b, c = probs.shape[:2]
    labels = np.asarray(labels)
    if labels.shape != (b,) + probs.shape[2:]:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs labels {labels.shape}")
    y = one_hot(labels, c, probs.dtype)
    axes = (0,) + tuple(range(2, probs.ndim))
    inter = T.sum(probs * y, axis=axes)
    denom = T.sum(probs, axis=axes) + y.sum(axis=axes)
    dice = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    return 1.0 - T.mean(dice)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    if pred.shape != np.shape(target):
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs target {np.shape(target)}")
    diff = pred - np.asarray(target, dtype=pred.dtype)
    return T.mean(diff * diff)


def supervised_loss(seg_probs: Tensor, labels, sdf_pred: Tensor, sdf_target) -> tuple[Tensor, Tensor]:
    """(Dice term, MSE term) over labeled samples only."""
    if seg_probs.shape[0] == 0:
        raise ValueError("supervised loss needs at least one labeled sample")
    return dice_loss(seg_probs, labels), mse(sdf_pred, sdf_target)


def consistency_loss(student: Tensor, fused: FusedPrediction) -> Tensor:
    """Mean of exp(-U) * (student - fused)^2 over every element."""
    target = np.asarray(fused.value, dtype=student.dtype)
    if student.shape != target.shape:
        raise ValueError(f"shape mismatch: student {student.shape} vs teacher {target.shape}")
    weight = np.broadcast_to(np.exp(-np.asarray(fused.uncertainty, dtype=student.dtype)), target.shape)
    diff = student - target
    return T.mean(diff * diff * weight)


def warmup_lambda(step: int, max_steps: int) -> float:
    """0.1 * exp(-5 (1 - i/i_max)^2); steps past ``max_steps`` clamp to 0.1."""
    if max_steps <= 0:
        return LAMBDA_MAX
    frac = min(max(step, 0), max_steps) / max_steps
    return LAMBDA_MAX * math.exp(-5.0 * (1.0 - frac) ** 2)


def _terms(out: StudentOutput, seg_fused, sdf_fused, labels, sdf_target, n_labeled, sdf_weight):
    ls = out.seg_probs[:n_labeled]
    lz = out.sdf_pred[:n_labeled]
    sup_seg, sup_sdf = supervised_loss(ls, labels, lz, sdf_target)
    con_seg = consistency_loss(out.seg_probs, seg_fused)
    con_sdf = consistency_loss(out.sdf_pred, sdf_fused)
    if sdf_weight != 1.0:
        sup_sdf = sup_sdf * sdf_weight
        con_sdf = con_sdf * sdf_weight
    return sup_seg, sup_sdf, con_seg, con_sdf


def _combine(sup_seg, sup_sdf, con_seg, con_sdf, lam) -> Tensor:
    return sup_seg + sup_sdf + lam * (con_seg + con_sdf)


def _breakdown(terms, lam, total, parts=None) -> LossBreakdown:
    s, z, cs, cz = (float(t.data) for t in terms)
    return LossBreakdown(s, z, cs, cz, float(total.data), lam, total, parts or {})


def stage_loss(stage: str, *, lam: float, labels, sdf_target, n_labeled: int,
               student: StudentOutput | None = None, seg_fused: FusedPrediction | None = None,
               sdf_fused: FusedPrediction | None = None,
               student2d: StudentOutput | None = None,
               seg_fused2d: FusedPrediction | None = None, sdf_fused2d: FusedPrediction | None = None,
               labels2d=None, sdf_target2d=None, n_labeled2d: int | None = None,
               alpha: float = 1.0, sdf_weight: float = 1.0) -> LossBreakdown:
    """Compose a stage objective.

    ``2d`` and ``3d``: supervised + lam * consistency for ``student`` against
    (``seg_fused``, ``sdf_fused``). ``hybrid``: the 3D objective plus
    ``alpha`` times the same objective for ``student2d``; the 2D term uses
    ``seg_fused2d``/``sdf_fused2d`` when given (separate regularisation) and
    the shared hybrid targets otherwise. Reported components of the hybrid
    stage are the alpha-weighted sums, so total = sup + lam * cons holds.
    """
    if student is None or seg_fused is None or sdf_fused is None:
        raise ValueError(f"stage {stage!r} needs student outputs and fused teacher predictions")
    if stage in ("2d", "3d"):
        terms = _terms(student, seg_fused, sdf_fused, labels, sdf_target, n_labeled, sdf_weight)
        total = _combine(*terms, lam)
        return _breakdown(terms, lam, total)
    if stage != "hybrid":
        raise ValueError(f"unknown stage {stage!r}")
    if student2d is None:
        raise ValueError("hybrid stage needs the 2D student outputs")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    t3 = _terms(student, seg_fused, sdf_fused, labels, sdf_target, n_labeled, sdf_weight)
    t2 = _terms(student2d, seg_fused2d or seg_fused, sdf_fused2d or sdf_fused,
                labels if labels2d is None else labels2d,
                sdf_target if sdf_target2d is None else sdf_target2d,
                n_labeled if n_labeled2d is None else n_labeled2d, sdf_weight)
    l3 = _combine(*t3, lam)
    l2 = _combine(*t2, lam)
    total = l3 + alpha * l2
    terms = [a + alpha * b for a, b in zip(t3, t2)]
    parts = {"3d": _breakdown(t3, lam, l3), "2d": _breakdown(t2, lam, l2)}
    return _breakdown(terms, lam, total, parts)

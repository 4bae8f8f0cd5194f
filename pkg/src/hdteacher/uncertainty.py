"""Entropy and variance uncertainty, confidence weighting and ensemble fusion.

Member stacks are numpy arrays shaped (J, batch, channels, *spatial). The
class axis of a probability member is axis 1 of the member (axis 2 of the
stack). Fusion runs on teacher outputs only, so nothing here is differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import to_volumes

PROB_FLOOR = 1e-7


@dataclass
class McEnsemble:
    """K stochastic teacher passes: seg and sdf stacks of shape (K, b, C, ...)."""
    seg: np.ndarray
    sdf: np.ndarray

    def __post_init__(self):
        if self.seg.shape[0] < 1:
            raise ValueError("an ensemble needs at least one member")
        if self.seg.shape[0] != self.sdf.shape[0]:
            raise ValueError(f"member count mismatch: seg {self.seg.shape} vs sdf {self.sdf.shape}")

    @property
    def k(self) -> int:
        return self.seg.shape[0]


@dataclass
class FusedPrediction:
    kind: str  # "seg" or "sdf"
    value: np.ndarray
    uncertainty: np.ndarray
    weights: np.ndarray | None = None


def entropy_map(probs: np.ndarray, num_classes: int, axis: int = 1) -> np.ndarray:
    """Per-location entropy with log base ``num_classes``; keeps ``axis`` as size 1."""
    if num_classes < 2:
        raise ValueError(f"entropy needs at least 2 classes, got {num_classes}")
    if probs.shape[axis] != num_classes:
        raise ValueError(f"axis {axis} of {probs.shape} does not hold {num_classes} classes")
    p = np.asarray(probs)
    logp = np.log(np.clip(p, PROB_FLOOR, 1.0)) / np.log(num_classes)
    ent = -(p * logp).sum(axis=axis, keepdims=True)
    return np.clip(ent, 0.0, 1.0)


def confidence_weights(members: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-location softmax over members of (1 - entropy); shape (J, b, 1, ...)."""
    conf = 1.0 - entropy_map(members, num_classes, axis=2)
    conf = conf - conf.max(axis=0, keepdims=True)
    e = np.exp(conf)
    return e / e.sum(axis=0, keepdims=True)


def _check_stack(members, what):
    members = np.asarray(members)
    if members.ndim < 3:
        raise ValueError(f"{what}: expected a (J, batch, channels, ...) stack, got shape {members.shape}")
    return members


def fuse_seg(members, num_classes: int) -> FusedPrediction:
    """Confidence-weighted sum of probability maps and its entropy."""
    if isinstance(members, (list, tuple)):
        shapes = {np.shape(m) for m in members}
        if len(shapes) != 1:
            raise ValueError(f"fuse_seg: member shapes differ: {sorted(shapes)}")
    members = _check_stack(members, "fuse_seg")
    weights = confidence_weights(members, num_classes)
    fused = (weights * members).sum(axis=0)
    return FusedPrediction("seg", fused, entropy_map(fused, num_classes, axis=1), weights)


def fuse_sdf(members) -> FusedPrediction:
    """Mean field and population variance over members."""
    if isinstance(members, (list, tuple)):
        shapes = {np.shape(m) for m in members}
        if len(shapes) != 1:
            raise ValueError(f"fuse_sdf: member shapes differ: {sorted(shapes)}")
    members = _check_stack(members, "fuse_sdf")
    mean = members.mean(axis=0)
    var = ((members - mean) ** 2).mean(axis=0)
    return FusedPrediction("sdf", mean, var)


def _stack_to_volumes(stack: np.ndarray, batch: int) -> np.ndarray:
    return np.stack([to_volumes(m, batch) for m in stack])


def hybrid_concat(two_d: McEnsemble, three_d: McEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """Join slice-wise 2D members (converted to volumes) with 3D members.

    Returns the (2K, b, C, d, h, w) seg and sdf stacks.
    """
    if two_d.k != three_d.k:
        raise ValueError(f"member count mismatch: 2D has {two_d.k}, 3D has {three_d.k}")
    batch = three_d.seg.shape[1]
    seg2 = two_d.seg if two_d.seg.ndim == 6 else _stack_to_volumes(two_d.seg, batch)
    sdf2 = two_d.sdf if two_d.sdf.ndim == 6 else _stack_to_volumes(two_d.sdf, batch)
    if seg2.shape != three_d.seg.shape or sdf2.shape != three_d.sdf.shape:
        raise ValueError(f"2D members {seg2.shape} do not match 3D members {three_d.seg.shape}")
    return np.concatenate([seg2, three_d.seg]), np.concatenate([sdf2, three_d.sdf])


def fuse_hybrid(two_d: McEnsemble, three_d: McEnsemble, num_classes: int):
    """Hybrid (seg, sdf) FusedPredictions over all 2K members."""
    seg, sdf = hybrid_concat(two_d, three_d)
    return fuse_seg(seg, num_classes), fuse_sdf(sdf)

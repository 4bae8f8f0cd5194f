"""Signed distance fields from label maps.

Convention: negative inside the class, positive outside, exactly zero on
boundary voxels (foreground voxels with a background 6-neighbour; the space
beyond the volume edge is not background). Each sign is normalised by its
own maximum magnitude so the field lies in [-1, 1].

Distances are physical: ``spacing`` gives the voxel size along each array
axis, in the same order as the axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

_FAR = 1e20
ORACLE_MAX_VOXELS = 32 ** 3


@dataclass(frozen=True)
class LabelVolume:
    labels: np.ndarray
    spacing: tuple[float, ...]
    num_classes: int

    def __post_init__(self):
        if len(self.spacing) != self.labels.ndim:
            raise ValueError(f"spacing {self.spacing} does not match label dims {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"label values must lie in [0, {self.num_classes - 1}]")


def _unpack(labels, spacing):
    if isinstance(labels, LabelVolume):
        return np.asarray(labels.labels), tuple(float(s) for s in labels.spacing)
    labels = np.asarray(labels)
    if spacing is None:
        spacing = (1.0,) * labels.ndim
    if len(spacing) != labels.ndim:
        raise ValueError(f"spacing {tuple(spacing)} does not match label dims {labels.shape}")
    return labels, tuple(float(s) for s in spacing)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels that touch background through a face."""
    mask = np.asarray(mask, dtype=bool)
    touching = np.zeros_like(mask)
    for axis in range(mask.ndim):
        bg = ~mask
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        touching[tuple(lo)] |= bg[tuple(hi)]
        touching[tuple(hi)] |= bg[tuple(lo)]
    return mask & touching


def squared_edt(sites: np.ndarray, spacing) -> np.ndarray:
    """Exact squared Euclidean distance from every voxel to the nearest site.

    Separable lower-envelope-of-parabolas transform, one pass per axis.
    """
    sites = np.asarray(sites, dtype=bool)
    f = np.where(sites, 0.0, _FAR)
    for axis, step in enumerate(spacing):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        lines = moved.reshape(-1, moved.shape[-1])
        kernels.edt_lines(lines, float(step))
        f = np.moveaxis(lines.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(f)


def _assemble(fg, d_in, d_out):
    if not fg.any():
        return np.ones(fg.shape)
    if fg.all():
        return -np.ones(fg.shape)
    out = np.empty(fg.shape)
    bg = ~fg
    out[bg] = d_out[bg] / d_out[bg].max()
    out[fg] = -d_in[fg] / d_in[fg].max()
    out[boundary_mask(fg)] = 0.0
    return out


def compute_sdf(labels, class_id: int, spacing=None) -> np.ndarray:
    """Normalised signed distance field of one class, float64."""
    labels, spacing = _unpack(labels, spacing)
    fg = labels == class_id
    if not fg.any() or fg.all():
        return _assemble(fg, None, None)
    d_in = np.sqrt(squared_edt(~fg, spacing))
    d_out = np.sqrt(squared_edt(fg, spacing))
    return _assemble(fg, d_in, d_out)


def oracle_sdf(labels, class_id: int, spacing=None) -> np.ndarray:
    """Same contract as :func:`compute_sdf` by exhaustive pairwise search."""
    labels, spacing = _unpack(labels, spacing)
    if labels.size > ORACLE_MAX_VOXELS:
        raise ValueError(f"oracle_sdf supports at most {ORACLE_MAX_VOXELS} voxels, got {labels.size}")
    fg = labels == class_id
    if not fg.any() or fg.all():
        return _assemble(fg, None, None)
    coords = np.indices(labels.shape).reshape(labels.ndim, -1).T * np.asarray(spacing)
    flat = fg.reshape(-1)
    dist = np.empty(flat.size)
    for region, other in ((flat, ~flat), (~flat, flat)):
        targets = coords[other]
        idx = np.flatnonzero(region)
        for start in range(0, idx.size, 512):
            chunk = idx[start:start + 512]
            diff = coords[chunk, None, :] - targets[None, :, :]
            dist[chunk] = np.sqrt((diff * diff).sum(axis=-1).min(axis=1))
    dist = dist.reshape(labels.shape)
    return _assemble(fg, dist, dist)


def sdf_channels(labels, num_classes: int, spacing=None) -> np.ndarray:
    """Per-class fields stacked as (C, *dims), float32."""
    labels, spacing = _unpack(labels, spacing)
    return np.stack([compute_sdf(labels, c, spacing) for c in range(num_classes)]).astype(np.float32)

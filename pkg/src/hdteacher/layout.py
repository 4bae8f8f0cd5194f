"""Volume <-> slice-batch reshaping.

``to_slices`` stacks batch and depth: (b, c, d, h, w) -> (b*d, c, h, w), with
slice j of volume i landing at index i*d + j. ``to_volumes`` inverts it.
Both accept numpy arrays or Tensors (the Tensor path is differentiable).
"""

import numpy as np

from . import tensor as T


def to_slices(x):
    if x.ndim != 5:
        raise ValueError(f"to_slices expects a rank-5 (b, c, d, h, w) input, got shape {x.shape}")
    b, c, d, h, w = x.shape
    if isinstance(x, T.Tensor):
        return T.reshape(T.transpose(x, (0, 2, 1, 3, 4)), (b * d, c, h, w))
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3, 4)).reshape(b * d, c, h, w)


def to_volumes(x, batch: int):
    if x.ndim != 4:
        raise ValueError(f"to_volumes expects a rank-4 (b*d, c, h, w) input, got shape {x.shape}")
    n, c, h, w = x.shape
    if batch < 1 or n % batch:
        raise ValueError(f"cannot split {n} slices into {batch} volumes")
    d = n // batch
    if isinstance(x, T.Tensor):
        return T.transpose(T.reshape(x, (batch, d, c, h, w)), (0, 2, 1, 3, 4))
    return np.ascontiguousarray(x.reshape(batch, d, c, h, w).transpose(0, 2, 1, 3, 4))

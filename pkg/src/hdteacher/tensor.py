"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op builds its output eagerly and, when gradients are being recorded,
attaches the parent tensors and a backward rule. ``Tensor.backward`` walks
the recorded graph in reverse topological order.

Layout is channels-first throughout: (batch, channel, h, w) for 2D and
(batch, channel, d, h, w) for 3D data.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "no_grad", "is_grad_enabled", "make_rng",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "tanh", "relu",
    "sum", "mean", "reshape", "transpose", "concat", "softmax", "conv",
    "max_pool", "upsample_nearest", "dropout", "sgd_step", "grad_check",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def make_rng(seed) -> np.random.Generator:
    """Seeded counter-based (Philox) generator used for every stochastic op."""
    return np.random.Generator(np.random.Philox(seed))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim > 5:
            raise ValueError(f"tensor rank must be at most 5, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, index): return _getitem(self, index)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions / shape

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inverse),))


def _getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(a.data[index]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------- spatial ops

def _to_rank5(arr: np.ndarray, spatial_rank: int) -> np.ndarray:
    return arr if spatial_rank == 3 else arr[:, :, None]


def conv(x: Tensor, kernel: Tensor, spatial_rank: int = 3, stride: int = 1,
         padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel`` (out_ch, in_ch, *window)."""
    if spatial_rank not in (2, 3):
        raise ValueError(f"spatial_rank must be 2 or 3, got {spatial_rank}")
    if x.ndim != spatial_rank + 2 or kernel.ndim != spatial_rank + 2:
        raise ValueError(f"conv{spatial_rank}d expects rank-{spatial_rank + 2} input and kernel, "
                         f"got input {x.shape} and kernel {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if x.dtype != kernel.dtype:
        raise TypeError(f"dtype mismatch: input {x.dtype} vs kernel {kernel.dtype}")
    pad = [(0, 0), (0, 0)] + [(padding, padding)] * spatial_rank
    xp = np.ascontiguousarray(np.pad(x.data, pad))
    spatial_in = xp.shape[2:]
    out_spatial = tuple((n - k) // stride + 1 for n, k in zip(spatial_in, kernel.shape[2:]))
    if any(n < 1 for n in out_spatial):
        raise ValueError(f"kernel {kernel.shape} larger than padded input {xp.shape}")
    out_shape = (x.shape[0], kernel.shape[0]) + out_spatial

    w5 = np.ascontiguousarray(_to_rank5(kernel.data, spatial_rank))
    xp5 = _to_rank5(xp, spatial_rank)
    out = np.zeros(out_shape, dtype=x.dtype)
    kernels.conv_forward(xp5, w5, _to_rank5(out, spatial_rank), stride)
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * spatial_rank)

    def backward(g):
        g5 = np.ascontiguousarray(_to_rank5(g, spatial_rank))
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            kernels.conv_backward_input(g5, w5, _to_rank5(gxp, spatial_rank), stride)
            crop = (slice(None), slice(None)) + tuple(
                slice(padding, padding + n) for n in x.shape[2:])
            gx = gxp[crop]
        if kernel.requires_grad:
            gw = np.zeros_like(kernel.data)
            kernels.conv_backward_weight(g5, xp5, _to_rank5(gw, spatial_rank), stride)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, g.ndim)))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward)


def _check_divisible(x: Tensor, spatial_rank: int, factor: int, what: str):
    if any(n % factor for n in x.shape[2:]):
        raise ValueError(f"{what}: spatial dims {x.shape[2:]} not divisible by {factor}")
    if x.ndim != spatial_rank + 2:
        raise ValueError(f"{what}: expected rank-{spatial_rank + 2} input, got {x.shape}")


def max_pool(x: Tensor, spatial_rank: int = 3, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    _check_divisible(x, spatial_rank, size, "max_pool")
    B, C = x.shape[:2]
    spatial = x.shape[2:]
    split = [B, C]
    for n in spatial:
        split += [n // size, size]
    v = x.data.reshape(split)
    # bring the window axes last: (B, C, n1, n2, [n3], s, s, [s])
    outer = [0, 1] + [2 + 2 * i for i in range(spatial_rank)]
    inner = [3 + 2 * i for i in range(spatial_rank)]
    win = v.transpose(outer + inner).reshape(B, C, *(n // size for n in spatial), -1)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape([B, C] + [n // size for n in spatial] + [size] * spatial_rank)
        gv = gwin.transpose(np.argsort(outer + inner))
        return (gv.reshape(x.shape),)

    return _result(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest(x: Tensor, spatial_rank: int = 3, factor: int = 2) -> Tensor:
    out = x.data
    for axis in range(2, 2 + spatial_rank):
        out = np.repeat(out, factor, axis=axis)

    def backward(g):
        B, C = x.shape[:2]
        split = [B, C]
        for n in x.shape[2:]:
            split += [n, factor]
        return (g.reshape(split).sum(axis=tuple(3 + 2 * i for i in range(spatial_rank))),)

    return _result(out, (x,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must satisfy 0 <= rate < 1, got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- optimisation

def sgd_step(params: Sequence[Tensor], learning_rate: float):
    """Plain SGD: ``p -= lr * grad`` then clear every grad."""
    for i, p in enumerate(params):
        if p.grad is None:
            label = p.name or f"#{i}"
            raise ValueError(f"parameter {label} has no gradient")
    for p in params:
        p.data -= p.data.dtype.type(learning_rate) * p.grad.astype(p.data.dtype, copy=False)
        p.grad = None


def grad_check(f: Callable[..., Tensor], inputs, epsilon: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``inputs`` is one tensor or a sequence; each must be float64. The error
    per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 inputs, got {t.dtype}")
        t.requires_grad = True
        t.grad = None
    out = f(*inputs) if len(inputs) > 1 else f(inputs[0])
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    worst = 0.0
    with no_grad():
        for t in inputs:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                up = float((f(*inputs) if len(inputs) > 1 else f(inputs[0])).data)
                flat[i] = orig - epsilon
                down = float((f(*inputs) if len(inputs) > 1 else f(inputs[0])).data)
                flat[i] = orig
                numeric = (up - down) / (2 * epsilon)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst

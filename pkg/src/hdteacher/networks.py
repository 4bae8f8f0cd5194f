"""Dual-decoder U-Nets (shared encoder; segmentation and SDF decoders).

Per level: two 3-wide convs with ReLU; max-pool 2 down; nearest x2 upsample
followed by a conv on the way up; skip connections by channel concatenation.
Features double per level from ``base_features``. A teacher network adds a
dropout layer after the encoder's last layer, active only in Monte-Carlo
passes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .layout import to_slices, to_volumes
from .tensor import Tensor
from .uncertainty import McEnsemble

BRANCHES = ("seg", "sdf")
# Small output heads keep early logits near zero; He-scaled heads saturate the
# softmax once large 2D features are summed in.
HEAD_INIT_STD = 0.01


@dataclass
class UNetConfig:
    spatial_rank: int
    in_channels: int
    num_classes: int
    base_features: int = 32
    depth: int = 4
    teacher_dropout_rate: float = 0.5

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ValueError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.base_features < 1 or self.depth < 1 or self.in_channels < 1:
            raise ValueError("base_features, depth and in_channels must all be >= 1")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 <= self.teacher_dropout_rate < 1:
            raise ValueError(f"teacher_dropout_rate must lie in [0, 1), got {self.teacher_dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    def features(self, level: int) -> int:
        return self.base_features * 2 ** level


@dataclass
class StudentOutput:
    seg_probs: Tensor
    sdf_pred: Tensor
    seg_features: Tensor
    sdf_features: Tensor

    def detached(self) -> StudentOutput:
        return StudentOutput(*(t.detach() for t in
                               (self.seg_probs, self.sdf_pred, self.seg_features, self.sdf_features)))


class DualDecoderNet:
    """Parameters plus architecture for one student or teacher model."""

    def __init__(self, config: UNetConfig, rng=None, dtype=np.float32, teacher: bool = False,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.teacher = teacher
        self.dtype = np.dtype(dtype)
        if params is None:
            if rng is None:
                raise ValueError("a fresh network needs an rng for initialisation")
            params = self._init_params(rng)
        self.params = params

    # ------------------------------------------------------------ parameters

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        win = (3,) * cfg.spatial_rank
        one = (1,) * cfg.spatial_rank
        shapes = {}

        def conv(name, cin, cout, window=win):
            shapes[f"{name}.w"] = (cout, cin) + window
            shapes[f"{name}.b"] = (cout,)

        cin = cfg.in_channels
        for level in range(cfg.depth + 1):
            f = cfg.features(level)
            conv(f"enc{level}.conv1", cin, f)
            conv(f"enc{level}.conv2", f, f)
            cin = f
        for branch in BRANCHES:
            for level in reversed(range(cfg.depth)):
                f = cfg.features(level)
                conv(f"{branch}.up{level}", cfg.features(level + 1), f)
                conv(f"{branch}.dec{level}.conv1", 2 * f, f)
                conv(f"{branch}.dec{level}.conv2", f, f)
            conv(f"{branch}.head", cfg.base_features, cfg.num_classes, one)
        return shapes

    def _init_params(self, rng) -> dict[str, Tensor]:
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".b"):
                data = np.zeros(shape)
            elif ".head." in name:
                data = rng.normal(0.0, HEAD_INIT_STD, size=shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
            params[name] = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def encoder_parameters(self) -> list[Tensor]:
        return [p for n, p in self.params.items() if n.startswith("enc")]

    def copy(self, teacher: bool | None = None, dtype=None) -> DualDecoderNet:
        dtype = self.dtype if dtype is None else np.dtype(dtype)
        params = {n: Tensor(p.data.astype(dtype, copy=True), requires_grad=True, name=n)
                  for n, p in self.params.items()}
        return DualDecoderNet(self.config, dtype=dtype,
                              teacher=self.teacher if teacher is None else teacher, params=params)

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name}")
            if arrays[name].shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arrays[name].shape} != expected {p.shape}")
            p.data = np.array(arrays[name], dtype=self.dtype)

    # ------------------------------------------------------------ forward pieces

    def _conv(self, name, x, padding=1):
        return T.conv(x, self.params[f"{name}.w"], self.config.spatial_rank,
                      padding=padding, bias=self.params[f"{name}.b"])

    def _double(self, prefix, x):
        x = T.relu(self._conv(f"{prefix}.conv1", x))
        return T.relu(self._conv(f"{prefix}.conv2", x))

    def check_input(self, x: Tensor):
        cfg = self.config
        if x.ndim != cfg.spatial_rank + 2:
            raise ValueError(f"expected rank-{cfg.spatial_rank + 2} input, got shape {x.shape}")
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"input has {x.shape[1]} channels, network expects {cfg.in_channels}")
        factor = 2 ** cfg.depth
        if any(n % factor for n in x.shape[2:]):
            raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {factor} (depth {cfg.depth})")

    def encode(self, x: Tensor, dropout_rng=None):
        rank = self.config.spatial_rank
        skips = []
        for level in range(self.config.depth):
            x = self._double(f"enc{level}", x)
            skips.append(x)
            x = T.max_pool(x, rank)
        x = self._double(f"enc{self.config.depth}", x)
        if dropout_rng is not None:
            x = T.dropout(x, self.config.teacher_dropout_rate, True, dropout_rng)
        return skips, x

    def decode(self, branch: str, skips, bottom: Tensor) -> Tensor:
        rank = self.config.spatial_rank
        x = bottom
        for level in reversed(range(self.config.depth)):
            up = T.relu(self._conv(f"{branch}.up{level}", T.upsample_nearest(x, rank)))
            x = self._double(f"{branch}.dec{level}", T.concat([skips[level], up], axis=1))
        return x

    def heads(self, seg_features: Tensor, sdf_features: Tensor) -> tuple[Tensor, Tensor]:
        seg = T.softmax(self._conv("seg.head", seg_features, padding=0), axis=1)
        sdf = T.tanh(self._conv("sdf.head", sdf_features, padding=0))
        return seg, sdf


def _perturb(x: Tensor, noise_sigma: float, rng) -> Tensor:
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if noise_sigma == 0:
        return x
    if rng is None:
        raise ValueError("input noise needs an rng")
    xi = np.clip(rng.normal(0.0, noise_sigma, size=x.shape), -2 * noise_sigma, 2 * noise_sigma)
    return x + xi.astype(x.dtype)


def _as_input(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _run(net: DualDecoderNet, x: Tensor, dropout_rng=None):
    skips, bottom = net.encode(x, dropout_rng)
    return net.decode("seg", skips, bottom), net.decode("sdf", skips, bottom)


def forward_student(net: DualDecoderNet, x, noise_sigma: float = 0.0, rng=None) -> StudentOutput:
    """Noisy input -> encoder -> both decoders -> softmax / tanh heads."""
    x = _as_input(x, net.dtype)
    net.check_input(x)
    f_seg, f_sdf = _run(net, _perturb(x, noise_sigma, rng))
    seg, sdf = net.heads(f_seg, f_sdf)
    return StudentOutput(seg, sdf, f_seg, f_sdf)


def forward_teacher_mc(net: DualDecoderNet, x, k: int, noise_sigma: float, rng) -> McEnsemble:
    """K no-grad passes with fresh input noise and dropout masks each."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    x = _as_input(x, net.dtype)
    net.check_input(x)
    segs, sdfs = [], []
    with T.no_grad():
        for _ in range(k):
            f_seg, f_sdf = _run(net, _perturb(x.detach(), noise_sigma, rng),
                                rng if net.teacher else None)
            seg, sdf = net.heads(f_seg, f_sdf)
            segs.append(seg.data)
            sdfs.append(sdf.data)
    return McEnsemble(np.stack(segs), np.stack(sdfs))


def augmented_input(x3d: Tensor, out2d: StudentOutput) -> Tensor:
    """Image channels followed by the 2D class probabilities as volumes."""
    seg_vol = to_volumes(out2d.seg_probs, x3d.shape[0])
    if seg_vol.shape[2:] != x3d.shape[2:]:
        raise ValueError(f"2D output volume {seg_vol.shape} does not match 3D input {x3d.shape}")
    return T.concat([x3d, seg_vol], axis=1)


def _hybrid(f3d: Tensor, f2d_slices: Tensor, batch: int) -> Tensor:
    f2d = to_volumes(f2d_slices, batch)
    if f2d.shape != f3d.shape:
        raise ValueError(f"feature shape mismatch: 3D features {f3d.shape} vs 2D features {f2d.shape}")
    return f3d + f2d


def forward_3d_augmented(net3d: DualDecoderNet, x3d, out2d: StudentOutput, mode: str = "student",
                         k: int = 1, noise_sigma: float = 0.0, rng=None):
    """3D pass on [image, 2D probabilities] with 2D features summed before the heads.

    ``out2d`` must come from the 2D student run on ``to_slices(x3d)``. Mode
    ``student`` returns a StudentOutput whose feature fields are the hybrid
    features; ``teacher_mc`` returns a K-member McEnsemble.
    """
    x3d = _as_input(x3d, net3d.dtype)
    if net3d.config.spatial_rank != 3:
        raise ValueError("forward_3d_augmented needs a 3D network")
    batch = x3d.shape[0]
    if mode == "student":
        x_aug = augmented_input(x3d, out2d)
        net3d.check_input(x_aug)
        f_seg, f_sdf = _run(net3d, _perturb(x_aug, noise_sigma, rng))
        h_seg = _hybrid(f_seg, out2d.seg_features, batch)
        h_sdf = _hybrid(f_sdf, out2d.sdf_features, batch)
        seg, sdf = net3d.heads(h_seg, h_sdf)
        return StudentOutput(seg, sdf, h_seg, h_sdf)
    if mode == "teacher_mc":
        if k < 1:
            raise ValueError(f"K must be >= 1, got {k}")
        fixed = out2d.detached()
        segs, sdfs = [], []
        with T.no_grad():
            x_aug = augmented_input(x3d.detach(), fixed)
            net3d.check_input(x_aug)
            for _ in range(k):
                f_seg, f_sdf = _run(net3d, _perturb(x_aug, noise_sigma, rng),
                                    rng if net3d.teacher else None)
                seg, sdf = net3d.heads(_hybrid(f_seg, fixed.seg_features, batch),
                                       _hybrid(f_sdf, fixed.sdf_features, batch))
                segs.append(seg.data)
                sdfs.append(sdf.data)
        return McEnsemble(np.stack(segs), np.stack(sdfs))
    raise ValueError(f"mode must be 'student' or 'teacher_mc', got {mode!r}")


def make_pair(config: UNetConfig, rng, dtype=np.float32) -> tuple[DualDecoderNet, DualDecoderNet]:
    """Fresh student and a teacher initialised as its exact copy."""
    student = DualDecoderNet(config, rng, dtype=dtype)
    return student, student.copy(teacher=True)


__all__ = [
    "UNetConfig", "StudentOutput", "DualDecoderNet", "forward_student", "forward_teacher_mc",
    "forward_3d_augmented", "augmented_input", "make_pair", "to_slices", "to_volumes",
]

"""Stage-wise HD-Teacher training: 2D, then 3D on 2D-augmented input, then
the hybrid stage that trains both students against the fused teachers.

One training step in the 3D and hybrid stages is one 3D batch; the 2D nets
see exactly the slices of that batch.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import HdTeacherState
from .data import DataSplit, augment, sample_patch
from .layout import to_slices, to_volumes
from .losses import LossBreakdown, dice_loss, mse, stage_loss, warmup_lambda
from .metrics import overlap_metrics
from .networks import (
    DualDecoderNet, StudentOutput, forward_3d_augmented, forward_student, forward_teacher_mc,
)
from .uncertainty import McEnsemble, entropy_map, fuse_hybrid, fuse_sdf, fuse_seg

STAGES = ("2d", "3d", "hybrid")
PREREQUISITES = {"2d": (), "3d": ("2d",), "hybrid": ("2d", "3d")}
LOG_FIELDS = ("stage", "epoch", "step", "lr", "lambda", "supervised_seg", "supervised_sdf",
              "consistency_seg", "consistency_sdf", "total", "val_dice")

reshape_c = to_slices
reshape_c_inv = to_volumes


class StageOrderError(RuntimeError):
    """A stage was started before its prerequisites finished."""


class TrainingDiverged(RuntimeError):
    """A non-finite loss was produced."""


@dataclass
class StageConfig:
    stage: str
    epochs: int = 3000
    steps_per_epoch: int = 1
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_decay_every: int = 1000
    tau: float = 0.99
    k: int = 8
    alpha: float = 1.0
    noise_sigma: float = 0.1
    batch_2d: int = 32
    batch_3d: int = 2
    labeled_fraction: float = 0.5
    patch_2d: tuple[int, int] = (256, 256)
    patch_3d: tuple[int, int, int] = (32, 256, 256)
    sdf_weight: float = 1.0
    regularization: str = "hybrid"
    validate: bool = True

    def __post_init__(self):
        self.patch_2d = tuple(int(p) for p in self.patch_2d)
        self.patch_3d = tuple(int(p) for p in self.patch_3d)
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if not 0 <= self.tau < 1:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.k < 1:
            raise ValueError(f"K must be >= 1, got {self.k}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_2d < 2 or self.batch_3d < 2:
            raise ValueError("batch sizes must be >= 2 (half labeled, half unlabeled)")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.lr_decay_every < 1:
            raise ValueError("epochs, steps_per_epoch and lr_decay_every must be >= 1")
        if self.regularization not in ("hybrid", "separate"):
            raise ValueError(f"regularization must be 'hybrid' or 'separate', got {self.regularization!r}")
        if self.noise_sigma < 0 or self.lr <= 0:
            raise ValueError("noise_sigma must be >= 0 and lr > 0")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_2d"] = list(self.patch_2d)
        d["patch_3d"] = list(self.patch_3d)
        return d


@dataclass
class StageReport:
    stage: str
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("nan")
    seconds: float = 0.0


# ---------------------------------------------------------------- EMA and freezing

def ema_update(teacher: DualDecoderNet, student: DualDecoderNet, tau: float):
    """theta_t <- tau * theta_t + (1 - tau) * theta_s for every parameter."""
    if not 0 <= tau < 1:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    if teacher.params.keys() != student.params.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, t in teacher.params.items():
        s = student.params[name]
        if t.shape != s.shape:
            raise ValueError(f"parameter {name}: teacher shape {t.shape} != student shape {s.shape}")
    for name, t in teacher.params.items():
        s = student.params[name].data
        t.data *= t.data.dtype.type(tau)
        t.data += t.data.dtype.type(1.0 - tau) * s.astype(t.data.dtype, copy=False)


def _copy_into(dst: DualDecoderNet, src: DualDecoderNet):
    for name, p in dst.params.items():
        p.data = src.params[name].data.astype(p.data.dtype, copy=True)


def snapshot(nets) -> list[dict[str, np.ndarray]]:
    return [{n: p.data.copy() for n, p in net.params.items()} for net in nets]


def restore(nets, snap):
    for net, arrays in zip(nets, snap):
        for n, p in net.params.items():
            p.data = arrays[n].copy()


# ---------------------------------------------------------------- batches

def _n_labeled(batch: int, fraction: float) -> int:
    return min(batch, max(1, int(round(batch * fraction))))


def _draw(samples, rng, patch, labeled: bool):
    s = samples[int(rng.integers(0, len(samples)))]
    x, y, z = sample_patch(s.image, s.labels if labeled else None, s.sdf if labeled else None, patch, rng)
    return augment((x, y, z), rng)


def sample_batch(split: DataSplit, patch, batch: int, fraction: float, rng):
    """(x, labels, sdf, n_labeled) with the labeled samples first; x has a channel axis."""
    n_lab = _n_labeled(batch, fraction)
    if not split.unlabeled:
        n_lab = batch
    lab = [_draw(split.labeled, rng, patch, True) for _ in range(n_lab)]
    unl = [_draw(split.unlabeled, rng, patch, False) for _ in range(batch - n_lab)]
    x = np.stack([p[0] for p in lab + unl])[:, None].astype(np.float32)
    labels = np.stack([p[1] for p in lab]).astype(np.int64)
    sdf = np.stack([p[2] for p in lab]).astype(np.float32)
    return x, labels, sdf, n_lab


def _volume_output(out: StudentOutput, batch: int) -> StudentOutput:
    return StudentOutput(to_volumes(out.seg_probs, batch), to_volumes(out.sdf_pred, batch), None, None)


def _ensemble_volumes(ens: McEnsemble, batch: int) -> McEnsemble:
    return McEnsemble(np.stack([to_volumes(m, batch) for m in ens.seg]),
                      np.stack([to_volumes(m, batch) for m in ens.sdf]))


# ---------------------------------------------------------------- stage steps

def _step_2d(state, cfg, split, lam, lr):
    rng = state.rng
    C = split.num_classes
    x, labels, sdf, n_lab = sample_batch(split, cfg.patch_2d, cfg.batch_2d, cfg.labeled_fraction, rng)
    out = forward_student(state.student2d, x, cfg.noise_sigma, rng)
    ens = forward_teacher_mc(state.teacher2d, x, cfg.k, cfg.noise_sigma, rng)
    br = stage_loss("2d", lam=lam, labels=labels, sdf_target=sdf, n_labeled=n_lab, student=out,
                    seg_fused=fuse_seg(ens.seg, C), sdf_fused=fuse_sdf(ens.sdf), sdf_weight=cfg.sdf_weight)
    _check_finite(br, "2d")
    br.total_tensor.backward()
    T.sgd_step(state.student2d.parameters(), lr)
    ema_update(state.teacher2d, state.student2d, cfg.tau)
    return br


def _step_3d(state, cfg, split, lam, lr):
    rng = state.rng
    C = split.num_classes
    x, labels, sdf, n_lab = sample_batch(split, cfg.patch_3d, cfg.batch_3d, cfg.labeled_fraction, rng)
    with T.no_grad():
        out2 = forward_student(state.student2d, to_slices(x))
    out3 = forward_3d_augmented(state.student3d, x, out2, "student", noise_sigma=cfg.noise_sigma, rng=rng)
    ens = forward_3d_augmented(state.teacher3d, x, out2, "teacher_mc", k=cfg.k,
                               noise_sigma=cfg.noise_sigma, rng=rng)
    br = stage_loss("3d", lam=lam, labels=labels, sdf_target=sdf, n_labeled=n_lab, student=out3,
                    seg_fused=fuse_seg(ens.seg, C), sdf_fused=fuse_sdf(ens.sdf), sdf_weight=cfg.sdf_weight)
    _check_finite(br, "3d")
    br.total_tensor.backward()
    T.sgd_step(state.student3d.parameters(), lr)
    ema_update(state.teacher3d, state.student3d, cfg.tau)
    return br


def _step_hybrid(state, cfg, split, lam, lr):
    rng = state.rng
    C = split.num_classes
    x, labels, sdf, n_lab = sample_batch(split, cfg.patch_3d, cfg.batch_3d, cfg.labeled_fraction, rng)
    b = x.shape[0]
    xs = to_slices(x)
    out2 = forward_student(state.student2d, xs, cfg.noise_sigma, rng)
    out3 = forward_3d_augmented(state.student3d, x, out2, "student", noise_sigma=cfg.noise_sigma, rng=rng)
    ens2 = forward_teacher_mc(state.teacher2d, xs, cfg.k, cfg.noise_sigma, rng)
    ens3 = forward_3d_augmented(state.teacher3d, x, out2, "teacher_mc", k=cfg.k,
                                noise_sigma=cfg.noise_sigma, rng=rng)
    if cfg.regularization == "hybrid":
        seg_f, sdf_f = fuse_hybrid(ens2, ens3, C)
        seg_f2 = sdf_f2 = None
    else:
        seg_f, sdf_f = fuse_seg(ens3.seg, C), fuse_sdf(ens3.sdf)
        vol2 = _ensemble_volumes(ens2, b)
        seg_f2, sdf_f2 = fuse_seg(vol2.seg, C), fuse_sdf(vol2.sdf)
    br = stage_loss("hybrid", lam=lam, labels=labels, sdf_target=sdf, n_labeled=n_lab, student=out3,
                    seg_fused=seg_f, sdf_fused=sdf_f, student2d=_volume_output(out2, b),
                    seg_fused2d=seg_f2, sdf_fused2d=sdf_f2, alpha=cfg.alpha, sdf_weight=cfg.sdf_weight)
    _check_finite(br, "hybrid")
    br.total_tensor.backward()
    T.sgd_step(state.student2d.parameters() + state.student3d.parameters(), lr)
    ema_update(state.teacher2d, state.student2d, cfg.tau)
    ema_update(state.teacher3d, state.student3d, cfg.tau)
    return br


def _step_baseline(state, cfg, split, lam, lr):
    rng = state.rng
    x, labels, sdf, _ = sample_batch(split, cfg.patch_3d, cfg.batch_3d, 1.0, rng)
    out = forward_student(state.student3d, x, cfg.noise_sigma, rng)
    dice = dice_loss(out.seg_probs, labels)
    reg = mse(out.sdf_pred, sdf)
    total = dice + reg * cfg.sdf_weight
    if not math.isfinite(float(total.data)):
        raise TrainingDiverged(f"baseline: non-finite loss {float(total.data)}")
    total.backward()
    T.sgd_step(state.student3d.parameters(), lr)
    _copy_into(state.teacher3d, state.student3d)
    return LossBreakdown(float(dice.data), float(reg.data) * cfg.sdf_weight, 0.0, 0.0, float(total.data), 0.0)


STEP_FNS = {"2d": _step_2d, "3d": _step_3d, "hybrid": _step_hybrid, "baseline": _step_baseline}


def _check_finite(br, stage):
    if not math.isfinite(br.total):
        raise TrainingDiverged(f"{stage}: non-finite loss {br.total} (components {br.row()})")


# ---------------------------------------------------------------- stage driver

def _trained_nets(state, stage):
    if stage == "2d":
        return [(state.student2d, state.teacher2d)]
    if stage in ("3d", "baseline"):
        return [(state.student3d, state.teacher3d)]
    return [(state.student2d, state.teacher2d), (state.student3d, state.teacher3d)]


def _check_order(state: HdTeacherState, stage: str):
    if stage == "baseline":
        if state.kind != "baseline":
            raise StageOrderError("the supervised baseline needs a baseline state")
        return
    if state.kind != "hdteacher" or state.student2d is None:
        raise StageOrderError(f"stage {stage!r} needs an HD-Teacher state with 2D and 3D networks")
    missing = [p for p in PREREQUISITES[stage] if p not in state.completed]
    if missing:
        raise StageOrderError(f"stage {stage!r} requires completed stage(s) {missing}; "
                              f"completed so far: {state.completed}")


def _dump(dump_dir, stage, step, lr, lam, exc):
    if dump_dir is None:
        return None
    path = Path(dump_dir) / f"diverged_{stage}_step{step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"stage": stage, "step": step, "lr": lr, "lambda": lam, "error": str(exc)},
                               indent=1))
    return path


def validation_dice(state: HdTeacherState, samples, num_classes: int, mode: str, k: int, seed: int = 0):
    """Mean foreground Dice of ``infer`` over ``samples``."""
    scores = []
    for s in samples:
        res = infer(state, s.image, num_classes, mode=mode, k=k, seed=seed)
        for c in range(1, num_classes):
            scores.append(overlap_metrics(res.labels, s.labels, c)[0])
    return float(np.mean(scores)) if scores else float("nan")


def _val_mode(stage):
    return {"2d": "2d", "baseline": "student"}.get(stage, "3d")


def run_stage(state: HdTeacherState, cfg: StageConfig | None, split: DataSplit, *, baseline_cfg=None,
              log_path=None, progress=None, dump_dir=None) -> StageReport:
    """Train one stage in place and return its per-epoch history.

    ``cfg.stage`` selects 2d / 3d / hybrid; pass ``baseline_cfg`` (and a
    baseline state) instead to train the supervised 3D baseline.
    """
    stage = "baseline" if baseline_cfg is not None else cfg.stage
    cfg = baseline_cfg if baseline_cfg is not None else cfg
    _check_order(state, stage)
    start = time.perf_counter()
    pairs = _trained_nets(state, stage)
    for student, teacher in pairs:
        _copy_into(teacher, student)  # EMA warm start
    step_fn = STEP_FNS[stage]
    report = StageReport(stage)
    all_nets = list(state.nets().values())
    best_snap = None
    writer = fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    try:
        step = 0
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            sums = dict.fromkeys(("supervised_seg", "supervised_sdf", "consistency_seg",
                                  "consistency_sdf", "total"), 0.0)
            lam = 0.0
            for _ in range(cfg.steps_per_epoch):
                lam = warmup_lambda(step, cfg.total_steps - 1) if stage != "baseline" else 0.0
                try:
                    br = step_fn(state, cfg, split, lam, lr)
                except TrainingDiverged as exc:
                    where = _dump(dump_dir, stage, step, lr, lam, exc)
                    raise TrainingDiverged(f"{exc}; diagnostics: {where}") from None
                for key in sums:
                    sums[key] += getattr(br, key)
                step += 1
                state.steps[stage] = state.steps.get(stage, 0) + 1
            row = {"stage": stage, "epoch": epoch, "step": step, "lr": lr, "lambda": lam}
            row.update({k: v / cfg.steps_per_epoch for k, v in sums.items()})
            val = float("nan")
            if cfg.validate and split.val:
                val = validation_dice(state, split.val, split.num_classes, _val_mode(stage), cfg.k)
                if best_snap is None or val > report.best_val:
                    report.best_val, report.best_epoch = val, epoch
                    best_snap = snapshot(all_nets)
            row["val_dice"] = val
            report.history.append(row)
            if writer is not None:
                writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
                fh.flush()
            if progress is not None:
                progress(row)
    finally:
        if fh is not None:
            fh.close()
    if best_snap is not None:
        restore(all_nets, best_snap)
    if stage == "2d":
        state.frozen2d = True
    elif stage == "3d":
        state.frozen2d = False
    if stage not in state.completed:
        state.completed.append(stage)
    report.seconds = time.perf_counter() - start
    return report


def run_baseline(state: HdTeacherState, cfg: StageConfig, split: DataSplit, **kw) -> StageReport:
    """Supervised-only 3D training on the labeled volumes (image input only)."""
    return run_stage(state, None, split.subset(labeled_only=True), baseline_cfg=cfg, **kw)


# ---------------------------------------------------------------- inference

@dataclass
class InferenceResult:
    labels: np.ndarray          # (d, h, w)
    probs: np.ndarray           # (C, d, h, w)
    sdf: np.ndarray             # (C, d, h, w)
    seg_uncertainty: np.ndarray  # (d, h, w)
    sdf_uncertainty: np.ndarray  # (C, d, h, w)


def _default_mode(state):
    if state.kind == "baseline":
        return "student"
    if "3d" in state.completed:
        return "3d"
    if "2d" in state.completed:
        return "2d"
    raise RuntimeError("cannot infer with an untrained state (no completed stages)")


def infer(state: HdTeacherState, volume: np.ndarray, num_classes: int | None = None, mode: str | None = None,
          k: int = 8, seed: int = 0) -> InferenceResult:
    """Teacher Monte-Carlo prediction for one (d, h, w) volume.

    ``mode``: ``3d`` (3D teacher on 2D-augmented input; the default once the
    3D stage ran), ``2d`` (2D teacher slice by slice), ``hybrid`` (fusion of
    both teachers' 2K members) or ``student`` (deterministic 3D student, for
    the baseline). Dropout is the only stochastic element; ``seed`` fixes it.
    Without an explicit ``mode`` an untrained state is an error.
    """
    mode = mode or _default_mode(state)
    volume = np.asarray(volume, dtype=np.float32)
    if volume.ndim != 3:
        raise ValueError(f"expected a (d, h, w) volume, got shape {volume.shape}")
    x = volume[None, None]
    C = num_classes or state.student3d.config.num_classes
    rng = T.make_rng(seed)
    if mode == "student":
        with T.no_grad():
            out = forward_student(state.student3d, x)
        probs, sdf = out.seg_probs.data, out.sdf_pred.data
        seg_u, sdf_u = entropy_map(probs, C), np.zeros_like(sdf)
    elif mode == "2d":
        ens = _ensemble_volumes(forward_teacher_mc(state.teacher2d, to_slices(x), k, 0.0, rng), 1)
        seg, sd = fuse_seg(ens.seg, C), fuse_sdf(ens.sdf)
        probs, sdf, seg_u, sdf_u = seg.value, sd.value, seg.uncertainty, sd.uncertainty
    elif mode in ("3d", "hybrid"):
        with T.no_grad():
            out2 = forward_student(state.student2d, to_slices(x))
        ens3 = forward_3d_augmented(state.teacher3d, x, out2, "teacher_mc", k=k, rng=rng)
        if mode == "3d":
            seg, sd = fuse_seg(ens3.seg, C), fuse_sdf(ens3.sdf)
        else:
            ens2 = forward_teacher_mc(state.teacher2d, to_slices(x), k, 0.0, rng)
            seg, sd = fuse_hybrid(ens2, ens3, C)
        probs, sdf, seg_u, sdf_u = seg.value, sd.value, seg.uncertainty, sd.uncertainty
    else:
        raise ValueError(f"unknown inference mode {mode!r}")
    return InferenceResult(np.argmax(probs[0], axis=0).astype(np.uint8), probs[0], sdf[0],
                           seg_u[0, 0], sdf_u[0])

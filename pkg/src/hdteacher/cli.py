"""``hdteacher`` command line: gen-data, train, eval, inspect.

Failures exit with status 2 after printing one JSON object on stderr:
``{"error": <kind>, "message": ..., "command": ...}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, HdTeacherState, load_checkpoint, save_checkpoint
from .config import (
    ABLATIONS, ConfigError, RunConfig, apply_ablation, preset, resolve_ablation,
)
from .data import DataError, build_split, load_dataset, read_volume, save_dataset
from .metrics import evaluate, mean_metrics
from .networks import UNetConfig
from .trainer import STAGES, PREREQUISITES, StageOrderError, TrainingDiverged, infer, run_baseline, run_stage

EXIT_ERROR = 2


class CliError(RuntimeError):
    """A usage problem detected by a command."""


# ---------------------------------------------------------------- helpers

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else preset(args.preset)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _prepare_out(path: Path, force: bool):
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"output directory {path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


def _say(args, msg):
    if not args.quiet:
        print(msg, flush=True)


def _fmt(v):
    return "nan" if isinstance(v, float) and math.isnan(v) else (f"{v:.6f}" if isinstance(v, float) else str(v))


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _prepare_out(out, args.force)
    s = cfg.split
    split = build_split(cfg.data, s.n_labeled, s.n_unlabeled, s.n_val, s.n_test, s.min_ratio)
    save_dataset(split, out)
    cfg.save(out / "config.json")
    _say(args, f"wrote {s.n_labeled} labeled + {s.n_unlabeled} unlabeled + {s.n_val} val + "
               f"{s.n_test} test volumes to {out}")
    return 0


# ---------------------------------------------------------------- train

def _stage_dir(out: Path, stage: str) -> Path:
    return out / "checkpoints" / stage


def _parse_stages(text: str | None, cfg: RunConfig) -> list[str]:
    if not text:
        return list(cfg.ablation_stages())
    stages = [s.strip() for s in text.split(",") if s.strip()]
    for s in stages:
        if s not in STAGES and s != "baseline":
            raise CliError(f"unknown stage {s!r}; choose from {', '.join(STAGES + ('baseline',))}")
    return stages


def train_pipeline(cfg: RunConfig, data_dir, out_dir, stages, *, force: bool = False, resume_from=None,
                   log=print) -> dict:
    """Run ``stages`` in order, reusing finished stage checkpoints under ``out_dir``."""
    out = Path(out_dir)
    split = load_dataset(data_dir)
    if split.num_classes != cfg.data.num_classes:
        raise CliError(f"dataset has {split.num_classes} classes, config expects {cfg.data.num_classes}")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    summary = {"stages": {}, "ablation": cfg.ablation}
    state = None
    if resume_from is not None:
        state = load_checkpoint(resume_from)
    for stage in [s for s in STAGES if s in stages]:
        ckpt = _stage_dir(out, stage)
        if ckpt.exists() and not force:
            state = load_checkpoint(ckpt)
            log(f"[{stage}] reusing checkpoint {ckpt}")
            continue
        if state is None:
            missing = [p for p in PREREQUISITES[stage]]
            if missing:
                prev = _stage_dir(out, missing[-1])
                if not prev.exists():
                    raise StageOrderError(f"stage {stage!r} needs the {missing[-1]!r} checkpoint at {prev}; "
                                          f"run --stages {','.join(missing + [stage])}")
                state = load_checkpoint(prev)
            else:
                state = HdTeacherState.create(cfg.net2d, cfg.net3d, cfg.seed)
        st_cfg = cfg.stage(stage)
        t0 = time.perf_counter()
        report = run_stage(state, st_cfg, split, log_path=out / "logs" / f"{stage}.csv",
                           progress=lambda r, s=stage: log(_progress_line(s, r)), dump_dir=out / "logs")
        state.info = {"ablation": cfg.ablation, "inference_k": cfg.inference_k}
        save_checkpoint(state, ckpt)
        summary["stages"][stage] = {"best_epoch": report.best_epoch, "best_val_dice": report.best_val,
                                    "seconds": round(time.perf_counter() - t0, 2)}
    if "baseline" in stages:
        ckpt = _stage_dir(out, "baseline")
        if ckpt.exists() and not force:
            log(f"[baseline] reusing checkpoint {ckpt}")
        else:
            if cfg.baseline is None:
                raise ConfigError("config has no baseline stage settings")
            base = HdTeacherState.create(
                None, UNetConfig(3, cfg.net2d.in_channels, cfg.data.num_classes, cfg.net3d.base_features,
                                 cfg.net3d.depth, cfg.net3d.teacher_dropout_rate),
                cfg.seed, kind="baseline")
            t0 = time.perf_counter()
            report = run_baseline(base, cfg.baseline, split, log_path=out / "logs" / "baseline.csv",
                                  progress=lambda r: log(_progress_line("baseline", r)))
            base.info = {"ablation": "baseline", "inference_k": cfg.inference_k}
            save_checkpoint(base, ckpt)
            summary["stages"]["baseline"] = {"best_epoch": report.best_epoch, "best_val_dice": report.best_val,
                                             "seconds": round(time.perf_counter() - t0, 2)}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def _progress_line(stage, row):
    return (f"[{stage}] epoch {row['epoch']} step {row['step']} lr {row['lr']:.3g} lambda {row['lambda']:.4f} "
            f"loss {row['total']:.4f} val_dice {_fmt(row['val_dice'])}")


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.ablation:
        cfg = apply_ablation(cfg, args.ablation)
    stages = _parse_stages(args.stages, cfg)
    if args.baseline and "baseline" not in stages:
        stages.append("baseline")
    train_pipeline(cfg, args.data, args.out, stages, force=args.force, resume_from=args.resume_from,
                   log=(lambda m: None) if args.quiet else print)
    return 0


# ---------------------------------------------------------------- eval

EVAL_FIELDS = ("volume", "dice", "jaccard", "hd95", "asd")


def _final_checkpoint(path: Path) -> Path:
    """Accept a stage checkpoint directory or a training output directory."""
    if (path / "manifest.json").exists():
        return path
    for stage in ("hybrid", "3d", "2d", "baseline"):
        cand = _stage_dir(path, stage)
        if (cand / "manifest.json").exists():
            return cand
    raise CheckpointError(f"no checkpoint found in {path}")


def evaluate_split(state: HdTeacherState | None, split, which: str = "test", mode: str | None = None,
                   k: int | None = None, seed: int = 0, self_eval: bool = False):
    samples = getattr(split, which, None)
    if not samples:
        raise DataError(f"dataset has no {which!r} samples")
    if state is None and not self_eval:
        raise CliError("evaluation needs a checkpoint (or --self-eval)")
    rows, reports = [], []
    for s in samples:
        if self_eval:
            pred = s.labels
        else:
            pred = infer(state, s.image, split.num_classes, mode=mode,
                         k=k or state.info.get("inference_k", 8), seed=seed).labels
        rep = evaluate(pred, s.labels, split.num_classes, split.spacing)
        reports.append(rep)
        m = rep.mean
        rows.append({"volume": s.id, "dice": m.dice, "jaccard": m.jaccard, "hd95": m.hd95, "asd": m.asd})
    mean = mean_metrics(r.mean for r in reports)
    rows.append({"volume": "mean", "dice": mean.dice, "jaccard": mean.jaccard, "hd95": mean.hd95,
                 "asd": mean.asd})
    return rows, reports


def write_metrics_csv(rows, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def cmd_eval(args) -> int:
    if not args.self_eval and not args.checkpoint:
        raise CliError("eval needs --checkpoint (or --self-eval)")
    split = load_dataset(args.data)
    state = None if args.self_eval else load_checkpoint(_final_checkpoint(Path(args.checkpoint)))
    rows, _ = evaluate_split(state, split, args.split, args.mode, args.k, args.seed or 0, args.self_eval)
    out = Path(args.out)
    write_metrics_csv(rows, out)
    if not args.quiet:
        print(" ".join(f"{f:>10}" for f in EVAL_FIELDS))
        for r in rows:
            print(" ".join(f"{_fmt(r[f]):>10}" for f in EVAL_FIELDS))
    return 0


# ---------------------------------------------------------------- inspect

def write_pgm(path: Path, image: np.ndarray):
    """Binary 8-bit portable graymap."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] -> {0..255} by rounding; values outside are clipped."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def inspect_volume(state: HdTeacherState, image: np.ndarray, num_classes: int, out: Path, k: int = 8,
                   seed: int = 0, mode: str | None = None) -> dict:
    if mode is None:
        mode = "hybrid" if "3d" in state.completed or not state.completed else "2d"
    if image.ndim != 3:
        raise CliError(f"expected a (d, h, w) volume, got shape {image.shape}")
    factor = 2 ** max(state.student3d.config.depth, state.student2d.config.depth)
    bad = [n for n in image.shape[1:] if n % factor] + ([image.shape[0]] if image.shape[0] % (
        2 ** state.student3d.config.depth) else [])
    if bad:
        raise CliError(f"volume shape {image.shape} incompatible with the networks "
                       f"(every extent must be divisible by {factor})")
    res = infer(state, image, num_classes, mode=mode, k=k, seed=seed)
    seg_u = res.seg_uncertainty
    sdf_u = np.clip(res.sdf_uncertainty.mean(axis=0), 0.0, 1.0)
    label_img = res.labels.astype(float) / max(1, num_classes - 1)
    out.mkdir(parents=True, exist_ok=True)
    maps = {"label": label_img, "seg_uncertainty": seg_u, "sdf_uncertainty": sdf_u}
    for name, vol in maps.items():
        for j in range(vol.shape[0]):
            write_pgm(out / f"{name}_slice{j:03d}.pgm", quantize(vol[j]))
    stats = {
        "mode": mode,
        "k": k,
        "shape": list(image.shape),
        "seg_uncertainty": {"mean": float(seg_u.mean()), "max": float(seg_u.max())},
        "sdf_uncertainty": {"mean": float(sdf_u.mean()), "max": float(sdf_u.max())},
        "label_fractions": [float((res.labels == c).mean()) for c in range(num_classes)],
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    return stats


def cmd_inspect(args) -> int:
    if args.random_init:
        cfg = _config(args)
        state = HdTeacherState.create(cfg.net2d, cfg.net3d, cfg.seed)
        num_classes = cfg.data.num_classes
    else:
        if not args.checkpoint:
            raise CliError("inspect needs --checkpoint (or --random-init)")
        state = load_checkpoint(_final_checkpoint(Path(args.checkpoint)))
        num_classes = state.student3d.config.num_classes
    if args.data:
        split = load_dataset(args.data)
        pool = {s.id: s for s in split.val + split.test + split.labeled + split.unlabeled}
        if args.volume not in pool:
            raise DataError(f"volume {args.volume!r} not in dataset {args.data}")
        image = pool[args.volume].image
    else:
        image = read_volume(Path(args.volume))[0].astype(np.float32)
    stats = inspect_volume(state, image, num_classes, Path(args.out), k=args.k, seed=args.seed or 0,
                           mode=args.mode)
    if not args.quiet:
        print(json.dumps(stats, indent=1, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdteacher", description="Hybrid dual mean-teacher segmentation")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_config=True):
        if with_config:
            sp.add_argument("--config", help="run configuration JSON (overrides --preset)")
            sp.add_argument("--preset", choices=("desk", "paper"), default="desk")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--quiet", action="store_true")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stages")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stages", help="comma-separated subset of 2d,3d,hybrid,baseline")
    t.add_argument("--ablation", choices=sorted(ABLATIONS) + ["no-sdf", "2d-only", "full"])
    t.add_argument("--baseline", action="store_true", help="also train the supervised 3D baseline")
    t.add_argument("--resume-from", help="checkpoint to start from instead of the stage cursor")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(e, with_config=False)
    e.add_argument("--checkpoint", help="stage checkpoint or training output directory")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="CSV path")
    e.add_argument("--split", default="test", choices=("test", "val"))
    e.add_argument("--mode", choices=("3d", "2d", "hybrid", "student"))
    e.add_argument("--k", type=int, default=None)
    e.add_argument("--self-eval", action="store_true", help="score reference labels against themselves")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="export uncertainty heatmaps for one volume")
    common(i)
    i.add_argument("--checkpoint")
    i.add_argument("--random-init", action="store_true", help="inspect untrained networks")
    i.add_argument("--data", help="dataset directory (then --volume is a sample id)")
    i.add_argument("--volume", required=True, help="sample id or VolumeFile stem")
    i.add_argument("--out", required=True)
    i.add_argument("--mode", choices=("3d", "2d", "hybrid"))
    i.add_argument("--k", type=int, default=8)
    i.set_defaults(func=cmd_inspect)
    return p


ERRORS = (CliError, ConfigError, DataError, CheckpointError, StageOrderError, TrainingDiverged,
          ValueError, KeyError, OSError, RuntimeError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ERRORS as exc:
        line = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(line), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

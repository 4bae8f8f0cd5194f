"""Hybrid 2D/3D dual-decoder mean-teacher segmentation on a small numpy autodiff core."""

from importlib.metadata import PackageNotFoundError, version

from .checkpoint import HdTeacherState, load_checkpoint, save_checkpoint
from .config import RunConfig, apply_ablation, desk_preset, paper_preset, preset
from .data import SyntheticSpec, build_split, generate_synthetic, load_dataset, save_dataset
from .kernels import BACKEND
from .metrics import evaluate
from .trainer import StageConfig, infer, run_baseline, run_stage

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "BACKEND", "HdTeacherState", "RunConfig", "StageConfig", "SyntheticSpec", "__version__", "apply_ablation",
    "build_split", "desk_preset", "evaluate", "generate_synthetic", "infer", "load_checkpoint", "load_dataset",
    "paper_preset", "preset", "run_baseline", "run_stage", "save_checkpoint", "save_dataset",
]

"""Run configuration: one JSON document holding data, network and stage
settings, with ``desk`` and ``paper`` presets and the ablation variants."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import ANISOTROPIC_SPACING, SyntheticSpec
from .networks import UNetConfig
from .trainer import STAGES, StageConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class SplitSizes:
    n_labeled: int = 4
    n_unlabeled: int = 36
    n_val: int = 4
    n_test: int = 8
    min_ratio: float = 4.0

    def __post_init__(self):
        if self.n_labeled < 1:
            raise ValueError(f"n_labeled must be >= 1, got {self.n_labeled}")
        if self.n_unlabeled < self.min_ratio * self.n_labeled:
            raise ValueError(f"n_unlabeled={self.n_unlabeled} breaks M >= {self.min_ratio:g}N "
                             f"with N={self.n_labeled}")
        if self.n_val < 0 or self.n_test < 1:
            raise ValueError("n_val must be >= 0 and n_test >= 1")


ABLATIONS = {
    # name: (stages, sdf on?, regularization, description)
    "2d-no-sdf": (("2d",), False, "hybrid", "2D Net+2D Reg"),
    "2d-sdf": (("2d",), True, "hybrid", "2D Net+SDF+2D Reg"),
    "separate-reg": (STAGES, True, "separate", "2D+3D Nets+SDF+Separate Reg"),
    "hybrid-reg": (STAGES, True, "hybrid", "2D+3D Nets+SDF+Hybrid Reg"),
}
ABLATION_ALIASES = {"no-sdf": "2d-no-sdf", "2d-only": "2d-no-sdf", "full": "hybrid-reg"}


@dataclass
class RunConfig:
    seed: int = 0
    preset: str = "desk"
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    split: SplitSizes = field(default_factory=SplitSizes)
    net2d: UNetConfig = field(default_factory=lambda: UNetConfig(2, 1, 2, 8, 2))
    net3d: UNetConfig = field(default_factory=lambda: UNetConfig(3, 3, 2, 8, 2))
    stages: dict[str, StageConfig] = field(default_factory=dict)
    baseline: StageConfig | None = None
    inference_k: int = 8
    ablation: str = "hybrid-reg"

    def __post_init__(self):
        self.validate()

    def validate(self):
        c = self.data.num_classes
        if self.net2d.spatial_rank != 2 or self.net3d.spatial_rank != 3:
            raise ConfigError("net2d must have spatial_rank 2 and net3d spatial_rank 3")
        if self.net2d.num_classes != c or self.net3d.num_classes != c:
            raise ConfigError(f"network num_classes must match data.num_classes={c}")
        if self.net3d.in_channels != self.net2d.in_channels + c:
            raise ConfigError(f"net3d.in_channels must be net2d.in_channels + num_classes = "
                              f"{self.net2d.in_channels + c}, got {self.net3d.in_channels}")
        if self.net3d.base_features != self.net2d.base_features:
            raise ConfigError("net2d and net3d need the same base_features (hybrid features are summed)")
        for name, st in self.stages.items():
            if name != st.stage:
                raise ConfigError(f"stages.{name} has stage id {st.stage!r}")
        if self.inference_k < 1:
            raise ConfigError(f"inference_k: K must be >= 1, got {self.inference_k}")
        if resolve_ablation(self.ablation) not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")

    # -------------------------------------------------------- serialisation

    def to_dict(self) -> dict:
        def plain(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, dict):
                return {k: plain(v) for k, v in obj.items()}
            if isinstance(obj, (tuple, list)):
                return [plain(v) for v in obj]
            return obj
        return plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        raw = copy.deepcopy(raw)
        _reject_unknown(raw, cls, "")
        kw = {}
        try:
            for key, value in raw.items():
                if key == "data":
                    _reject_unknown(value, SyntheticSpec, "data.")
                    kw[key] = SyntheticSpec(**value)
                elif key == "split":
                    _reject_unknown(value, SplitSizes, "split.")
                    kw[key] = SplitSizes(**value)
                elif key in ("net2d", "net3d"):
                    _reject_unknown(value, UNetConfig, f"{key}.")
                    kw[key] = UNetConfig(**value)
                elif key == "stages":
                    kw[key] = {name: _stage(v, f"stages.{name}.") for name, v in value.items()}
                elif key == "baseline":
                    kw[key] = None if value is None else _stage(value, "baseline.")
                else:
                    kw[key] = value
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(raw)

    def save(self, path):
        Path(path).write_text(self.to_json())

    # -------------------------------------------------------- helpers

    def stage(self, name: str) -> StageConfig:
        if name not in self.stages:
            raise ConfigError(f"config has no settings for stage {name!r}")
        return self.stages[name]

    def ablation_stages(self) -> tuple[str, ...]:
        return ABLATIONS[resolve_ablation(self.ablation)][0]

    def with_seed(self, seed: int) -> RunConfig:
        out = copy.deepcopy(self)
        out.seed = seed
        out.data.seed = seed
        return out


def _reject_unknown(raw, cls, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(prefix + k for k in unknown)}; "
                          f"allowed: {', '.join(sorted(known))}")


def _stage(raw, prefix) -> StageConfig:
    _reject_unknown(raw, StageConfig, prefix)
    try:
        return StageConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.')}: {exc}") from None


def resolve_ablation(name: str) -> str:
    return ABLATION_ALIASES.get(name, name)


def apply_ablation(cfg: RunConfig, name: str) -> RunConfig:
    """Copy of ``cfg`` configured as one of the ablation variants."""
    key = resolve_ablation(name)
    if key not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS) + sorted(ABLATION_ALIASES)}")
    _, sdf_on, reg, _ = ABLATIONS[key]
    out = copy.deepcopy(cfg)
    out.ablation = key
    for st in out.stages.values():
        st.sdf_weight = 1.0 if sdf_on else 0.0
        if st.stage == "hybrid":
            st.regularization = reg
    return out


# ---------------------------------------------------------------- presets

def desk_preset(seed: int = 0) -> RunConfig:
    """CPU-sized run: 32x32x16 anisotropic volumes, depth-2 base-8 nets,
    210 steps per stage, K=4."""
    common = dict(epochs=6, steps_per_epoch=35, lr_decay=0.1, lr_decay_every=2, tau=0.99, k=4,
                  alpha=1.0, noise_sigma=0.1, batch_2d=16, batch_3d=2, labeled_fraction=0.5,
                  patch_2d=(32, 32), patch_3d=(8, 32, 32))
    stages = {
        "2d": StageConfig("2d", lr=0.1, **common),
        "3d": StageConfig("3d", lr=0.1, **common),
        "hybrid": StageConfig("hybrid", lr=0.01, **common),
    }
    return RunConfig(
        seed=seed, preset="desk",
        data=SyntheticSpec(dims=(16, 32, 32), spacing=ANISOTROPIC_SPACING, num_classes=2, seed=seed),
        split=SplitSizes(4, 36, 4, 8),
        net2d=UNetConfig(2, 1, 2, base_features=8, depth=2),
        net3d=UNetConfig(3, 3, 2, base_features=8, depth=2),
        stages=stages,
        baseline=StageConfig("3d", lr=0.1, **common),
        inference_k=4,
    )


def paper_preset(seed: int = 0) -> RunConfig:
    """Published settings for the anisotropic 14-class lower-leg data
    (35 training scans, ~10% labeled). Far beyond a CPU budget."""
    common = dict(epochs=3000, steps_per_epoch=1, lr_decay=0.1, lr_decay_every=1000, tau=0.99, k=8,
                  alpha=1.0, noise_sigma=0.1, batch_2d=32, batch_3d=2, labeled_fraction=0.5,
                  patch_2d=(256, 256), patch_3d=(32, 256, 256))
    stages = {
        "2d": StageConfig("2d", lr=0.1, **common),
        "3d": StageConfig("3d", lr=0.1, **common),
        "hybrid": StageConfig("hybrid", lr=0.01, **common),
    }
    return RunConfig(
        seed=seed, preset="paper",
        data=SyntheticSpec(dims=(96, 378, 378), spacing=ANISOTROPIC_SPACING, num_classes=14, seed=seed),
        split=SplitSizes(4, 31, 2, 11),
        net2d=UNetConfig(2, 1, 14, base_features=16, depth=4),
        net3d=UNetConfig(3, 15, 14, base_features=16, depth=4),
        stages=stages,
        baseline=StageConfig("3d", lr=0.1, **common),
        inference_k=8,
    )


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def preset(name: str, seed: int = 0) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](seed)

"""Training state and its on-disk checkpoint format.

A checkpoint is a directory holding ``manifest.json`` (network configs,
parameter names/shapes/offsets, stage cursor, rng state) and ``params.f32``
(every parameter as little-endian float32, concatenated in manifest order).
Directories are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .networks import DualDecoderNet, UNetConfig
from .tensor import make_rng

FORMAT_VERSION = 1
NET_SLOTS = ("student2d", "teacher2d", "student3d", "teacher3d")


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint."""


@dataclass
class HdTeacherState:
    student2d: DualDecoderNet | None
    teacher2d: DualDecoderNet | None
    student3d: DualDecoderNet | None
    teacher3d: DualDecoderNet | None
    rng: np.random.Generator
    seed: int = 0
    completed: list[str] = field(default_factory=list)
    steps: dict[str, int] = field(default_factory=dict)
    frozen2d: bool = False
    kind: str = "hdteacher"  # or "baseline": a lone 3D net on images only
    info: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config2d: UNetConfig | None, config3d: UNetConfig, seed: int,
               kind: str = "hdteacher") -> HdTeacherState:
        rng = make_rng(seed)
        s2 = t2 = None
        if config2d is not None:
            s2 = DualDecoderNet(config2d, rng)
            t2 = s2.copy(teacher=True)
        s3 = DualDecoderNet(config3d, rng)
        t3 = s3.copy(teacher=True)
        return cls(s2, t2, s3, t3, rng, seed, kind=kind)

    def nets(self) -> dict[str, DualDecoderNet]:
        return {k: getattr(self, k) for k in NET_SLOTS if getattr(self, k) is not None}


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    def conv(v):
        if isinstance(v, np.ndarray):
            return {"__array__": v.dtype.str, "data": [int(t) for t in v.ravel()]}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return int(v) if isinstance(v, np.integer) else v
    return conv(rng.bit_generator.state)


def _rng_from_json(state: dict) -> np.random.Generator:
    def conv(v):
        if isinstance(v, dict) and "__array__" in v:
            return np.array(v["data"], dtype=np.dtype(v["__array__"]))
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    if state.get("bit_generator") != "Philox":
        raise CheckpointError(f"unsupported rng {state.get('bit_generator')!r}")
    bg = np.random.Philox()
    bg.state = conv(state)
    return np.random.Generator(bg)


def save_checkpoint(state: HdTeacherState, path) -> Path:
    path = Path(path)
    nets_meta = {}
    blobs = []
    offset = 0
    for slot, net in state.nets().items():
        entries = []
        for name, p in net.params.items():
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": arr.size})
            blobs.append(arr.tobytes())
            offset += arr.size
        nets_meta[slot] = {"config": net.config.to_dict(), "teacher": net.teacher, "params": entries}
    manifest = {
        "format": FORMAT_VERSION,
        "kind": state.kind,
        "seed": state.seed,
        "completed": list(state.completed),
        "steps": dict(state.steps),
        "frozen2d": state.frozen2d,
        "rng": _rng_state_to_json(state.rng),
        "nets": nets_meta,
        "info": state.info,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    (tmp / "params.f32").write_bytes(b"".join(blobs))
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if path.exists():
        old = path.with_name(path.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)
    return path


def load_checkpoint(path) -> HdTeacherState:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest in {path}") from None
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest in {path}: {exc}") from None
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    try:
        payload = np.frombuffer((path / "params.f32").read_bytes(), dtype="<f4")
    except FileNotFoundError:
        raise CheckpointError(f"{path}: missing params.f32") from None
    nets = {}
    total = 0
    try:
        for slot, meta in manifest["nets"].items():
            if slot not in NET_SLOTS:
                raise CheckpointError(f"{path}: unknown network slot {slot!r}")
            config = UNetConfig(**meta["config"])
            net = DualDecoderNet(config, make_rng(0), teacher=bool(meta["teacher"]))
            expected = net.param_shapes()
            arrays = {}
            for e in meta["params"]:
                name, shape = e["name"], tuple(e["shape"])
                if name not in expected:
                    raise CheckpointError(f"{path}: {slot} has unexpected parameter {name}")
                if shape != expected[name]:
                    raise CheckpointError(f"{path}: {slot} parameter {name} has shape {shape}, "
                                          f"network expects {expected[name]}")
                lo, n = int(e["offset"]), int(e["count"])
                if n != int(np.prod(shape)) or lo + n > payload.size:
                    raise CheckpointError(f"{path}: {slot} parameter {name} exceeds params.f32 "
                                          f"({payload.size} values)")
                arrays[name] = payload[lo:lo + n].reshape(shape)
                total += n
            missing = set(expected) - set(arrays)
            if missing:
                raise CheckpointError(f"{path}: {slot} is missing parameters {sorted(missing)}")
            net.load_arrays(arrays)
            nets[slot] = net
        if total != payload.size:
            raise CheckpointError(f"{path}: params.f32 holds {payload.size} values, manifest lists {total}")
        return HdTeacherState(
            nets.get("student2d"), nets.get("teacher2d"), nets.get("student3d"), nets.get("teacher3d"),
            _rng_from_json(manifest["rng"]), int(manifest["seed"]), list(manifest["completed"]),
            {k: int(v) for k, v in manifest["steps"].items()}, bool(manifest["frozen2d"]),
            manifest.get("kind", "hdteacher"), manifest.get("info", {}))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed manifest ({exc!r})") from None

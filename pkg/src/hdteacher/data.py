"""Synthetic volumes, volume files, splits, patches and augmentation.

Arrays are (d, h, w); ``spacing`` tuples follow the same axis order, so the
anisotropic preset is (5.0, 0.4, 0.4) mm with the coarse axis along depth.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .sdf import sdf_channels

ANISOTROPIC_SPACING = (5.0, 0.4, 0.4)
ISOTROPIC_SPACING = (1.0, 1.0, 1.0)
DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


class DataError(ValueError):
    """Malformed dataset, volume file or split."""


# ---------------------------------------------------------------- synthesis

@dataclass
class SyntheticSpec:
    dims: tuple[int, int, int] = (16, 32, 32)
    spacing: tuple[float, float, float] = ANISOTROPIC_SPACING
    num_classes: int = 2
    lobes: tuple[int, int] = (1, 3)
    radius_vox: tuple[float, float] = (0.2, 0.35)  # fraction of each extent
    contrast: tuple[float, float] = (0.8, 1.4)
    noise: float = 0.6
    texture: float = 0.4
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.lobes = tuple(int(n) for n in self.lobes)
        self.radius_vox = tuple(float(r) for r in self.radius_vox)
        self.contrast = tuple(float(c) for c in self.contrast)
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise DataError(f"volume dims must be three extents >= 4, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"spacing must be three positive values, got {self.spacing}")
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")

    @classmethod
    def anisotropic(cls, **kw) -> SyntheticSpec:
        return cls(spacing=ANISOTROPIC_SPACING, **kw)

    @classmethod
    def isotropic(cls, **kw) -> SyntheticSpec:
        return cls(spacing=ISOTROPIC_SPACING, **kw)


def _smooth(x: np.ndarray, passes: int = 2) -> np.ndarray:
    # repeated [1, 2, 1] / 4 along every axis with edge replication
    for _ in range(passes):
        for axis in range(x.ndim):
            p = np.pad(x, [(1, 1) if a == axis else (0, 0) for a in range(x.ndim)], mode="edge")
            lo = np.take(p, range(0, x.shape[axis]), axis=axis)
            mid = np.take(p, range(1, x.shape[axis] + 1), axis=axis)
            hi = np.take(p, range(2, x.shape[axis] + 2), axis=axis)
            x = 0.25 * lo + 0.5 * mid + 0.25 * hi
    return x


def _blob(rng, dims, spec: SyntheticSpec, grid) -> np.ndarray:
    """Union of 1-3 overlapping ellipsoids ("lobes") around a shared centre."""
    dims_a = np.array(dims, dtype=float)
    centre = rng.uniform(0.3, 0.7, size=3) * dims_a
    mask = np.zeros(dims, dtype=bool)
    for _ in range(rng.integers(spec.lobes[0], spec.lobes[1] + 1)):
        radii = rng.uniform(*spec.radius_vox, size=3) * dims_a
        offset = rng.normal(0.0, 0.12, size=3) * dims_a
        c = centre + offset
        r2 = sum(((g - ci) / ri) ** 2 for g, ci, ri in zip(grid, c, radii))
        mask |= r2 <= 1.0
    return mask


def _one_volume(rng, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    dims = spec.dims
    grid = np.meshgrid(*(np.arange(n, dtype=float) for n in dims), indexing="ij")
    labels = np.zeros(dims, dtype=np.uint8)
    for c in range(1, spec.num_classes):
        mask = _blob(rng, dims, spec, grid)
        if not mask.any():
            continue
        labels[mask] = c
    contrasts = [0.0] + list(rng.uniform(*spec.contrast, size=spec.num_classes - 1)
                             * np.arange(1, spec.num_classes))
    image = np.asarray(contrasts)[labels]
    image = image + spec.texture * _smooth(rng.normal(size=dims)) * 2.0
    image = image + spec.noise * rng.normal(size=dims)
    return image.astype(np.float32), labels


def generate_synthetic(spec: SyntheticSpec, count: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """``count`` (image, labels) pairs; volume i uses its own stream seeded by (seed, i)."""
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    out = []
    for i in range(count):
        rng = np.random.Generator(np.random.Philox(key=[spec.seed, i]))
        out.append(_one_volume(rng, spec))
    return out


def normalize(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per volume."""
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    if not std > 1e-12 * max(1.0, np.abs(x).max()):
        raise DataError("cannot normalise a constant volume")
    return ((x - x.mean()) / std).astype(np.float32)


# ---------------------------------------------------------------- patches

def sample_patch(x: np.ndarray, y, z, patch_dims, rng):
    """Crop the same uniformly-placed window from image, labels and SDF.

    ``x`` and ``y`` are (d, h, w) (``y`` may be None); ``z`` is (C, d, h, w) or
    None. Patch dims may have fewer axes than the volume; leading axes are then
    kept in full (a 2D patch from a volume picks a single slice index first).
    """
    spatial = x.shape
    patch_dims = tuple(int(p) for p in patch_dims)
    if len(patch_dims) > len(spatial):
        raise DataError(f"patch {patch_dims} has more axes than volume {spatial}")
    full = spatial[:len(spatial) - len(patch_dims)]
    if any(p > n or p < 1 for p, n in zip(patch_dims, spatial[len(full):])):
        raise DataError(f"patch {patch_dims} larger than volume {spatial}")
    index = tuple(int(rng.integers(0, n)) for n in full)
    corner = [int(rng.integers(0, n - p + 1)) for p, n in zip(patch_dims, spatial[len(full):])]
    window = index + tuple(slice(c, c + p) for c, p in zip(corner, patch_dims))
    return (x[window],
            None if y is None else y[window],
            None if z is None else z[(slice(None),) + window])


@dataclass(frozen=True)
class AugmentDraw:
    flips: tuple[bool, ...]
    rot90: int

    @property
    def identity(self) -> bool:
        return not any(self.flips) and self.rot90 % 4 == 0


def draw_augmentation(rng, ndim: int) -> AugmentDraw:
    return AugmentDraw(tuple(bool(f) for f in rng.integers(0, 2, size=ndim)), int(rng.integers(0, 4)))


def apply_augmentation(draw: AugmentDraw, array: np.ndarray | None, channel_axis: bool = False):
    """Flip the listed spatial axes, then rotate in the last two (in-plane) axes."""
    if array is None:
        return None
    lead = 1 if channel_axis else 0
    out = array
    for axis, flip in enumerate(draw.flips):
        if flip:
            out = np.flip(out, axis=lead + axis)
    if draw.rot90 % 4:
        out = np.rot90(out, k=draw.rot90, axes=(out.ndim - 2, out.ndim - 1))
    return np.ascontiguousarray(out)


def augment(patch, rng, square: bool | None = None):
    """Random flips along every spatial axis plus an in-plane 90-degree turn,
    applied identically to (x, y, z). Non-square in-plane patches only get
    0 or 180 degree turns so shapes are preserved."""
    x, y, z = patch
    draw = draw_augmentation(rng, x.ndim)
    if square is None:
        square = x.shape[-1] == x.shape[-2]
    if not square and draw.rot90 % 2:
        draw = AugmentDraw(draw.flips, (draw.rot90 + 1) % 4)
    return (apply_augmentation(draw, x), apply_augmentation(draw, y),
            apply_augmentation(draw, z, channel_axis=True))


# ---------------------------------------------------------------- volume files

@dataclass
class VolumeFile:
    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    dtype: str
    num_classes: int

    def header(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "dtype": self.dtype,
                "num_classes": self.num_classes}


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_volume(stem, array: np.ndarray, spacing, num_classes: int, dtype: str | None = None):
    """Write ``stem.json`` (header) and ``stem.raw`` (little-endian payload)."""
    stem = Path(stem)
    array = np.asarray(array)
    if dtype is None:
        dtype = "u8" if array.dtype.kind in "ub" else "f32le"
    if dtype not in DTYPES:
        raise DataError(f"unsupported dtype {dtype!r}")
    if dtype == "u8" and array.size and (array.min() < 0 or array.max() > 255):
        raise DataError("u8 volume values must lie in [0, 255]")
    meta = VolumeFile(tuple(int(n) for n in array.shape), tuple(float(s) for s in spacing), dtype,
                      int(num_classes))
    if len(meta.spacing) != len(meta.dims):
        raise DataError(f"spacing {meta.spacing} does not match dims {meta.dims}")
    stem.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(stem.with_suffix(".raw"), np.ascontiguousarray(array, dtype=DTYPES[dtype]).tobytes())
    _atomic_write(stem.with_suffix(".json"), json.dumps(meta.header(), indent=1).encode())
    return meta


def read_volume(stem) -> tuple[np.ndarray, VolumeFile]:
    stem = Path(stem)
    try:
        head = json.loads(stem.with_suffix(".json").read_text())
        meta = VolumeFile(tuple(int(n) for n in head["dims"]), tuple(float(s) for s in head["spacing"]),
                          str(head["dtype"]), int(head["num_classes"]))
    except FileNotFoundError:
        raise DataError(f"missing volume header {stem.with_suffix('.json')}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"corrupt volume header {stem.with_suffix('.json')}: {exc}") from None
    if meta.dtype not in DTYPES:
        raise DataError(f"{stem}: unsupported dtype {meta.dtype!r}")
    if not meta.dims or min(meta.dims) < 1:
        raise DataError(f"{stem}: dims must be positive, got {meta.dims}")
    payload = stem.with_suffix(".raw").read_bytes()
    dt = DTYPES[meta.dtype]
    expected = int(np.prod(meta.dims)) * dt.itemsize
    if len(payload) != expected:
        raise DataError(f"{stem}: payload is {len(payload)} bytes, header implies {expected}")
    array = np.frombuffer(payload, dtype=dt).reshape(meta.dims).copy()
    return (array.astype(np.float32) if meta.dtype == "f32le" else array), meta


# ---------------------------------------------------------------- splits

@dataclass
class Sample:
    id: str
    image: np.ndarray
    labels: np.ndarray | None = None
    sdf: np.ndarray | None = None


@dataclass
class DataSplit:
    labeled: list[Sample]
    unlabeled: list[Sample]
    val: list[Sample]
    test: list[Sample]
    spacing: tuple[float, ...]
    num_classes: int
    min_ratio: float = 4.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        n, m = len(self.labeled), len(self.unlabeled)
        if n < 1:
            raise DataError("the labeled split is empty")
        if m < self.min_ratio * n:
            raise DataError(f"unlabeled split too small: M={m} < {self.min_ratio:g}*N={self.min_ratio * n:g}")
        seen: dict[str, str] = {}
        for name in ("labeled", "unlabeled", "val", "test"):
            for s in getattr(self, name):
                if s.id in seen:
                    raise DataError(f"sample {s.id!r} appears in both {seen[s.id]} and {name}")
                seen[s.id] = name
        for s in self.labeled + self.val + self.test:
            if s.labels is None:
                raise DataError(f"sample {s.id!r} has no labels")
        for s in self.labeled:
            if s.sdf is None:
                raise DataError(f"labeled sample {s.id!r} has no SDF target")

    def subset(self, labeled_only: bool) -> DataSplit:
        """The same split without unlabeled data (for the supervised baseline)."""
        if not labeled_only:
            return self
        return DataSplit(self.labeled, [], self.val, self.test, self.spacing, self.num_classes, 0.0, self.meta)


def build_split(spec: SyntheticSpec, n_labeled: int, n_unlabeled: int, n_val: int, n_test: int,
                min_ratio: float = 4.0) -> DataSplit:
    """Generate, normalise and partition a synthetic dataset; labeled SDFs precomputed."""
    total = n_labeled + n_unlabeled + n_val + n_test
    pairs = generate_synthetic(spec, total)
    samples = []
    for i, (x, y) in enumerate(pairs):
        samples.append(Sample(f"vol{i:03d}", normalize(x), y))
    labeled = samples[:n_labeled]
    for s in labeled:
        s.sdf = sdf_channels(s.labels, spec.num_classes, spec.spacing)
    unlabeled = samples[n_labeled:n_labeled + n_unlabeled]
    for s in unlabeled:
        s.labels = None
    rest = samples[n_labeled + n_unlabeled:]
    return DataSplit(labeled, unlabeled, rest[:n_val], rest[n_val:], spec.spacing, spec.num_classes,
                     min_ratio, {"synthetic": _spec_dict(spec)})


def _spec_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


MANIFEST = "dataset.json"


def save_dataset(split: DataSplit, root) -> Path:
    """Write every sample as volume files plus a manifest of split membership."""
    root = Path(root)
    vols = root / "volumes"
    entries: dict[str, list[str]] = {}
    for name in ("labeled", "unlabeled", "val", "test"):
        entries[name] = []
        for s in getattr(split, name):
            entries[name].append(s.id)
            write_volume(vols / f"{s.id}_image", s.image, split.spacing, split.num_classes, "f32le")
            if s.labels is not None:
                write_volume(vols / f"{s.id}_label", s.labels, split.spacing, split.num_classes, "u8")
            if s.sdf is not None:
                for c in range(s.sdf.shape[0]):
                    write_volume(vols / f"{s.id}_sdf{c}", s.sdf[c], split.spacing, split.num_classes, "f32le")
    manifest = {"splits": entries, "spacing": list(split.spacing), "num_classes": split.num_classes,
                "min_ratio": split.min_ratio, "meta": split.meta}
    _atomic_write(root / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True).encode())
    return root / MANIFEST


def load_dataset(root) -> DataSplit:
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
        splits = manifest["splits"]
        num_classes = int(manifest["num_classes"])
    except FileNotFoundError:
        raise DataError(f"no dataset manifest at {root / MANIFEST}") from None
    except (KeyError, ValueError) as exc:
        raise DataError(f"corrupt dataset manifest {root / MANIFEST}: {exc}") from None
    vols = root / "volumes"

    def load(sid, with_labels, with_sdf):
        image, meta = read_volume(vols / f"{sid}_image")
        labels = read_volume(vols / f"{sid}_label")[0] if with_labels else None
        sdf = (np.stack([read_volume(vols / f"{sid}_sdf{c}")[0] for c in range(num_classes)])
               if with_sdf else None)
        return Sample(sid, image, labels, sdf)

    for name in ("labeled", "unlabeled", "val", "test"):
        if name not in splits:
            raise DataError(f"dataset manifest has no {name!r} split")
    return DataSplit(
        [load(s, True, True) for s in splits["labeled"]],
        [load(s, False, False) for s in splits["unlabeled"]],
        [load(s, True, False) for s in splits["val"]],
        [load(s, True, False) for s in splits["test"]],
        tuple(manifest["spacing"]), num_classes, float(manifest.get("min_ratio", 4.0)),
        manifest.get("meta", {}))

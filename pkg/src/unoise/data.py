"""Synthetic context-dependent segmentation data and a raw-slice dataset format.

The synthetic task places one landmark and several identical square blobs on
a noisy background.  The blobs carry a one-pixel checkerboard texture around
the landmark's intensity; the landmark itself is flat.  Only the blob sitting
at a fixed offset from the landmark is labelled as the target; the others are
distractors with exactly the same appearance, so a model can only find the
target by looking at the landmark.  A flat landmark is easily confused with
texture once noise is added, which makes it a pixel region the segmentation
depends on and cannot tolerate noise in.

On-disk layout written by :func:`save_dataset`::

    <dir>/manifest.json
    <dir>/images/<id>.f32   little-endian float32, C*H*W, row-major
    <dir>/masks/<id>.u8     uint8, H*W, row-major
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

MANIFEST_VERSION = 1
CLASS_NAMES = ["background", "target"]

Box = tuple[int, int, int, int]  # (y0, x0, y1, x1), end-exclusive


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class MissingFileError(DatasetError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class LabelError(DatasetError):
    pass


class ManifestError(DatasetError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    samples: list[Sample]
    normalization: tuple[float, float] = (0.0, 1.0)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def images(self, idx=None) -> np.ndarray:
        samples = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.image for s in samples])

    def masks(self, idx=None) -> np.ndarray:
        samples = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.mask for s in samples])

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.samples[0].image.shape


@dataclass
class SyntheticTaskSpec:
    image_size: int = 64
    n_distractors: int = 3
    landmark_size: int = 8
    landmark_intensity: float = 0.6
    # one-pixel checkerboard amplitudes around the mean intensities
    landmark_contrast: float = 0.0
    blob_contrast: float = 0.25
    # landmark pixels exempt from background noise
    landmark_quiet: bool = False
    blob_size: int = 8
    blob_intensity: float = 0.6
    # landmark origin -> target origin, (dy, dx)
    offset: tuple[int, int] = (0, 16)
    background: float = 0.1
    noise_level: float = 0.05
    min_gap: int = 2
    max_attempts: int = 2000

    def blob_origin_range(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """Inclusive origin ranges (y, x) where a blob can also host the landmark."""
        s, b, lm = self.image_size, self.blob_size, self.landmark_size
        ranges = []
        for d in self.offset:
            lo = max(0, d)
            hi = min(s - b, s - lm + d)
            ranges.append((lo, hi))
        return ranges[0], ranges[1]

    def validate(self) -> None:
        s = self.image_size
        if self.blob_size < 1 or self.landmark_size < 1:
            raise ValueError("shape sizes must be positive")
        if self.blob_size > s or self.landmark_size > s:
            raise ValueError("shapes do not fit inside the image")
        if self.landmark_contrast < 0 or self.blob_contrast < 0:
            raise ValueError("checkerboard contrasts must be >= 0")
        if self.n_distractors < 0:
            raise ValueError("n_distractors must be >= 0")
        (ylo, yhi), (xlo, xhi) = self.blob_origin_range()
        if ylo > yhi or xlo > xhi:
            raise ValueError(
                f"offset {self.offset} leaves no room for the landmark/target pair "
                f"in a {s}x{s} image"
            )
        # landmark and target may not overlap each other
        dy, dx = self.offset
        lm, b, g = self.landmark_size, self.blob_size, self.min_gap
        if _overlap((0, 0, lm, lm), (dy, dx, dy + b, dx + b), g):
            raise ValueError(f"offset {self.offset} makes the target overlap the landmark")
        # crude capacity check: total padded area of all blobs must fit the region
        area = (yhi - ylo + b + g) * (xhi - xlo + b + g)
        if (self.n_distractors + 1) * (b + g) ** 2 > area:
            raise ValueError(
                f"{self.n_distractors + 1} blobs of size {b} cannot be placed "
                f"without overlap in the available region"
            )


def _overlap(a: Box, b: Box, gap: int = 0) -> bool:
    return not (
        a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1]
    )


def _checker(n: int, mean: float, amplitude: float) -> np.ndarray:
    return mean + amplitude * ((np.add.outer(np.arange(n), np.arange(n)) % 2) * 2 - 1)


def landmark_pattern(spec: SyntheticTaskSpec) -> np.ndarray:
    return _checker(spec.landmark_size, spec.landmark_intensity, spec.landmark_contrast)


def blob_pattern(spec: SyntheticTaskSpec) -> np.ndarray:
    return _checker(spec.blob_size, spec.blob_intensity, spec.blob_contrast)


def _landmark_box(spec: SyntheticTaskSpec, blob: Box) -> Box:
    dy, dx = spec.offset
    lm = spec.landmark_size
    return (blob[0] - dy, blob[1] - dx, blob[0] - dy + lm, blob[1] - dx + lm)


def _place(spec: SyntheticTaskSpec, rng: np.random.Generator):
    """Draw blob positions, then pick the target uniformly among them.

    Every blob's landmark slot is kept free, so the layout alone carries no
    information about which blob is the target.
    """
    (ylo, yhi), (xlo, xhi) = spec.blob_origin_range()
    b, g = spec.blob_size, spec.min_gap
    n_blobs = spec.n_distractors + 1
    for _ in range(spec.max_attempts):
        blobs: list[Box] = []
        for _ in range(n_blobs):
            for _ in range(100):
                y = int(rng.integers(ylo, yhi + 1))
                x = int(rng.integers(xlo, xhi + 1))
                box = (y, x, y + b, x + b)
                if not any(_overlap(box, o, g) for o in blobs):
                    blobs.append(box)
                    break
            else:
                break
        if len(blobs) < n_blobs:
            continue
        slots = [_landmark_box(spec, o) for o in blobs]
        if any(_overlap(slot, o, g) for slot in slots for o in blobs):
            continue
        t = int(rng.integers(n_blobs))
        distractors = [o for i, o in enumerate(blobs) if i != t]
        return slots[t], blobs[t], distractors
    raise ValueError(
        f"could not place shapes after {spec.max_attempts} attempts; "
        "reduce n_distractors or shape sizes"
    )


def render(spec: SyntheticTaskSpec, landmark: Box, target: Box, distractors: list[Box],
           rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray]:
    s = spec.image_size
    img = np.full((s, s), spec.background, dtype=np.float64)
    y0, x0, y1, x1 = landmark
    img[y0:y1, x0:x1] = landmark_pattern(spec)
    for y0, x0, y1, x1 in [target, *distractors]:
        img[y0:y1, x0:x1] = blob_pattern(spec)
    if spec.noise_level > 0:
        if rng is None:
            raise ValueError("rng required when noise_level > 0")
        noise = spec.noise_level * rng.standard_normal(img.shape)
        if spec.landmark_quiet:
            y0, x0, y1, x1 = landmark
            noise[y0:y1, x0:x1] = 0.0
        img = img + noise
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    mask = np.zeros((s, s), dtype=np.uint8)
    y0, x0, y1, x1 = target
    mask[y0:y1, x0:x1] = 1
    return img[None], mask


def generate_synthetic(spec: SyntheticTaskSpec, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        landmark, target, distractors = _place(spec, rng)
        image, mask = render(spec, landmark, target, distractors, rng)
        meta = {"landmark": list(landmark), "target": list(target),
                "distractors": [list(d) for d in distractors]}
        samples.append(Sample(id=f"s{i:05d}", image=image, mask=mask, meta=meta))
    return Dataset(samples)


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle with ``seed`` then cut at ``round(train_fraction * n)``."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(dataset)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"train_fraction {train_fraction} leaves an empty side for n={n}")
    order = np.random.default_rng(seed).permutation(n)
    train = [dataset.samples[i] for i in order[:n_train]]
    val = [dataset.samples[i] for i in order[n_train:]]
    return Dataset(train, dataset.normalization), Dataset(val, dataset.normalization)


def normalize_window(raw: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affine map of [lo, hi] onto [0, 1]; values outside the window are clamped."""
    if not hi > lo:
        raise ValueError("normalization window must have hi > lo")
    out = (raw.astype(np.float64) - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.samples:
        img_rel = f"images/{s.id}.f32"
        mask_rel = f"masks/{s.id}.u8"
        s.image.astype("<f4").tofile(directory / img_rel)
        s.mask.astype(np.uint8).tofile(directory / mask_rel)
        entries.append({"id": s.id, "image": img_rel, "mask": mask_rel,
                        "shape": list(s.image.shape), "meta": s.meta})
    lo, hi = dataset.normalization
    # stored images are already in [0, 1]; the source window is kept for reference
    manifest = {
        "version": MANIFEST_VERSION,
        "class_names": CLASS_NAMES,
        "normalization": {"window": [0.0, 1.0], "source_window": [float(lo), float(hi)]},
        "samples": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {manifest.get('version')!r}")
    root = manifest_path.parent
    norm = manifest.get("normalization", {})
    lo, hi = norm.get("window", [0.0, 1.0])
    samples = []
    for e in manifest["samples"]:
        shape = tuple(e["shape"])
        if len(shape) != 3:
            raise ShapeMismatchError(f"{e['id']}: expected C,H,W shape, got {shape}")
        img_path, mask_path = root / e["image"], root / e["mask"]
        for p in (img_path, mask_path):
            if not p.exists():
                raise MissingFileError(f"missing file: {p}")
        raw = np.fromfile(img_path, dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise ShapeMismatchError(
                f"{img_path}: {raw.size} values, manifest shape {shape} needs {int(np.prod(shape))}")
        mask = np.fromfile(mask_path, dtype=np.uint8)
        if mask.size != shape[1] * shape[2]:
            raise ShapeMismatchError(
                f"{mask_path}: {mask.size} values, expected {shape[1] * shape[2]}")
        if mask.size and mask.max() > 1:
            raise LabelError(f"{mask_path}: labels outside {{0, 1}} (max {int(mask.max())})")
        image = normalize_window(raw.reshape(shape), lo, hi)
        samples.append(Sample(e["id"], image, mask.reshape(shape[1:]), e.get("meta", {})))
    source = norm.get("source_window", [lo, hi])
    return Dataset(samples, (float(source[0]), float(source[1])))

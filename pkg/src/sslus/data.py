"""Dataset manifests, image/mask I/O and the synthetic speckle-lesion generator."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["image_path", "mask_path", "split"]
MASK_THRESHOLD = 127  # 8-bit masks: values > 127 are foreground


class ManifestError(ValueError):
    """Raised when a manifest CSV cannot be parsed."""


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: Optional[str]
    split: str


@dataclass
class DatasetManifest:
    name: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
        return [e for e in self.entries if e.split == split]

    def split_counts(self) -> dict[str, int]:
        return {s: len(self.split_entries(s)) for s in SPLITS}


@dataclass(frozen=True)
class SubsetSpec:
    fraction: float
    seed: int

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")


@dataclass
class Sample:
    """One image (H,W,3 float32 in [0,1]) with optional binary mask (H,W uint8)."""

    id: str
    image: np.ndarray
    mask: Optional[np.ndarray] = None


def load_manifest(path: str | os.PathLike, check_paths: bool = True) -> DatasetManifest:
    """Read a `image_path,mask_path,split` CSV; paths are resolved relative to it."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}: line 1: expected header {','.join(MANIFEST_HEADER)!r}, got {header!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}: line {lineno}: expected 3 columns, got {len(row)}")
            image_path, mask_path, split = (c.strip() for c in row)
            if not image_path:
                raise ManifestError(f"{path}: line {lineno}: empty image_path")
            if split not in SPLITS:
                raise ManifestError(
                    f"{path}: line {lineno}: split must be one of {SPLITS}, got {split!r}"
                )
            image_path = str((root / image_path).resolve()) if not os.path.isabs(image_path) else image_path
            if image_path in seen:
                raise ManifestError(f"{path}: line {lineno}: duplicate image_path {image_path!r}")
            seen.add(image_path)
            mask: Optional[str] = None
            if mask_path:
                mask = str((root / mask_path).resolve()) if not os.path.isabs(mask_path) else mask_path
            if check_paths:
                if not os.path.exists(image_path):
                    raise FileNotFoundError(f"{path}: line {lineno}: image not found: {image_path}")
                if mask is not None and not os.path.exists(mask):
                    raise FileNotFoundError(f"{path}: line {lineno}: mask not found: {mask}")
            entries.append(ManifestEntry(image_path, mask, split))
    return DatasetManifest(name=path.stem, entries=entries)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            img = os.path.relpath(e.image_path, root) if os.path.isabs(e.image_path) else e.image_path
            msk = ""
            if e.mask_path is not None:
                msk = os.path.relpath(e.mask_path, root) if os.path.isabs(e.mask_path) else e.mask_path
            writer.writerow([img, msk, e.split])


def take_train_subset(manifest: DatasetManifest, spec: SubsetSpec) -> DatasetManifest:
    """Keep floor(fraction * |train|) train entries by seeded shuffle; val/test untouched.

    Subsets of increasing fraction under the same seed are nested, because each
    is a prefix of the same shuffled order.
    """
    train_idx = [i for i, e in enumerate(manifest.entries) if e.split == "train"]
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(train_idx))
    n_keep = math.floor(spec.fraction * len(train_idx))
    kept = {train_idx[j] for j in order[:n_keep]}
    entries = [
        e for i, e in enumerate(manifest.entries) if e.split != "train" or i in kept
    ]
    return DatasetManifest(name=manifest.name, entries=entries)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit PNG as H,W,3 float32 in [0,1]; grayscale is replicated to 3 channels."""
    with Image.open(path) as im:
        im = im.convert("RGB") if im.mode not in ("L", "RGB") else im
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def load_mask(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit mask PNG, binarized at >127, as H,W uint8 in {0,1}."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > MASK_THRESHOLD).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def save_mask(mask: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (H, W), output clipped to [0,1]."""
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError(f"size must be positive, got {size}")
    if img.shape[:2] == (h, w):
        return img.copy()
    out = cv2.resize(img.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
    if img.ndim == 3 and out.ndim == 2:
        out = out[:, :, None]
    return np.clip(out, 0.0, 1.0)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if mask.shape == (h, w):
        return mask.copy()
    out = cv2.resize(mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST)
    return out.astype(np.uint8)


def generate_synthetic_dataset(
    n: int, size: tuple[int, int], seed: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Generate n speckle images with one elliptical lesion each, plus binary masks.

    Each image is a dark background (~0.1) with a single elliptical region
    (mean ~0.45), multiplicative speckle noise and Gaussian blur. The mask is
    the clean ellipse. Deterministic given the seed.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    h, w = size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    images, masks = [], []
    for _ in range(n):
        cx = rng.uniform(0.30, 0.70) * w
        cy = rng.uniform(0.30, 0.70) * h
        ra = rng.uniform(0.10, 0.28) * w
        rb = rng.uniform(0.10, 0.28) * h
        theta = rng.uniform(0.0, np.pi)
        level = rng.uniform(0.35, 0.55)
        ct, st = np.cos(theta), np.sin(theta)
        dx, dy = xx - cx, yy - cy
        u = dx * ct + dy * st
        v = -dx * st + dy * ct
        mask = ((u / ra) ** 2 + (v / rb) ** 2 <= 1.0).astype(np.uint8)
        img = np.full((h, w), 0.1, dtype=np.float64)
        img[mask == 1] = level
        img *= 1.0 + 0.3 * rng.standard_normal((h, w))
        img = np.clip(img, 0.0, 1.0)
        img = gaussian_filter(img, sigma=1.0)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        images.append(np.repeat(img[:, :, None], 3, axis=2))
        masks.append(mask)
    return images, masks


def synthetic_samples(n: int, size: tuple[int, int], seed: int) -> list[Sample]:
    images, masks = generate_synthetic_dataset(n, size, seed)
    return [
        Sample(id=f"synth_{i:04d}", image=img, mask=msk)
        for i, (img, msk) in enumerate(zip(images, masks))
    ]


def write_synthetic_dataset(
    out_dir: str | os.PathLike,
    n: int,
    size: tuple[int, int],
    seed: int,
    split_fractions: tuple[float, float] = (0.7, 0.1),
) -> Path:
    """Write n synthetic image/mask PNGs plus a manifest.csv; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    samples = synthetic_samples(n, size, seed)
    n_train = math.floor(split_fractions[0] * n)
    n_val = math.floor(split_fractions[1] * n)
    entries = []
    for i, s in enumerate(samples):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        img_rel = f"images/{s.id}.png"
        msk_rel = f"masks/{s.id}_mask.png"
        save_image(s.image, out / img_rel)
        save_mask(s.mask, out / msk_rel)
        entries.append(ManifestEntry(img_rel, msk_rel, split))
    manifest = DatasetManifest(name="synthetic", entries=entries)
    manifest_path = out / "manifest.csv"
    save_manifest(manifest, manifest_path)
    return manifest_path


def load_samples(
    manifest: DatasetManifest,
    split: str,
    size: Optional[tuple[int, int]] = None,
    require_masks: bool = False,
) -> list[Sample]:
    """Materialize one split as in-memory samples, optionally resized."""
    samples = []
    for e in manifest.split_entries(split):
        img = load_image(e.image_path)
        mask = None
        if e.mask_path is not None:
            mask = load_mask(e.mask_path)
        elif require_masks:
            raise ValueError(f"entry {e.image_path!r} in split {split!r} has no mask")
        if size is not None:
            img = resize_image(img, size)
            if mask is not None:
                mask = resize_mask(mask, size)
        samples.append(Sample(id=e.image_path, image=img, mask=mask))
    return samples


def samples_from_arrays(
    images: np.ndarray | list[np.ndarray],
    masks: Optional[np.ndarray | list[np.ndarray]] = None,
    ids: Optional[list[str]] = None,
) -> list[Sample]:
    """Wrap in-memory arrays as samples; grayscale images are replicated to 3 channels."""
    out = []
    for i, img in enumerate(images):
        img = np.asarray(img, dtype=np.float32)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        mask = None
        if masks is not None:
            mask = (np.asarray(masks[i]) > 0).astype(np.uint8)
        sid = ids[i] if ids is not None else f"sample_{i:04d}"
        out.append(Sample(id=sid, image=img, mask=mask))
    return out

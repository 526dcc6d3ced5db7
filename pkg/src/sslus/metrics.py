"""Segmentation metrics (DSC/JC/HD/PPV/Recall), reports and overlay rendering."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial import cKDTree

from .data import Sample

METRIC_NAMES = ("dsc", "jc", "hd", "ppv", "rec")
REPORT_HEADER = ["id", "dsc", "jc", "hd", "ppv", "rec"]


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred > 0, truth > 0


def overlap_metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float, float]:
    """(DSC, JC, PPV, Recall) over foreground pixel sets.

    Conventions for degenerate inputs: both masks empty -> all four are 1;
    exactly one empty -> all four are 0.
    """
    p, t = _check_pair(pred, truth)
    np_, nt = int(p.sum()), int(t.sum())
    if np_ == 0 and nt == 0:
        return 1.0, 1.0, 1.0, 1.0
    if np_ == 0 or nt == 0:
        return 0.0, 0.0, 0.0, 0.0
    inter = int((p & t).sum())
    union = np_ + nt - inter
    return 2.0 * inter / (np_ + nt), inter / union, inter / np_, inter / nt


def hausdorff_sentinel(shape: tuple[int, int]) -> float:
    """Value reported when exactly one mask is empty: the image diagonal length."""
    return float(np.hypot(shape[0], shape[1]))


def hausdorff(pred: np.ndarray, truth: np.ndarray) -> float:
    """Symmetric Hausdorff distance over foreground pixel coordinates (Euclidean).

    Both masks empty -> 0. Exactly one empty -> the sentinel (image diagonal);
    evaluate_model flags such rows.
    """
    p, t = _check_pair(pred, truth)
    if not p.any() and not t.any():
        return 0.0
    if not p.any() or not t.any():
        return hausdorff_sentinel(p.shape)
    pts_p = np.argwhere(p).astype(np.float64)
    pts_t = np.argwhere(t).astype(np.float64)
    d_pt = cKDTree(pts_t).query(pts_p, k=1)[0].max()
    d_tp = cKDTree(pts_p).query(pts_t, k=1)[0].max()
    return float(max(d_pt, d_tp))


@dataclass
class ImageMetrics:
    id: str
    dsc: float
    jc: float
    hd: float
    ppv: float
    rec: float
    hd_is_sentinel: bool = False

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass
class MetricsReport:
    per_image: list[ImageMetrics]

    @property
    def mean(self) -> dict[str, float]:
        return {
            name: float(np.mean([m.values()[name] for m in self.per_image]))
            for name in METRIC_NAMES
        }

    @property
    def sd(self) -> dict[str, float]:
        # population standard deviation, matching "mean +/- SD" table columns
        return {
            name: float(np.std([m.values()[name] for m in self.per_image]))
            for name in METRIC_NAMES
        }

    def write_csv(self, path: str | os.PathLike) -> None:
        mean, sd = self.mean, self.sd
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_HEADER)
            for m in self.per_image:
                writer.writerow([m.id] + [repr(m.values()[n]) for n in METRIC_NAMES])
            writer.writerow(
                ["mean±sd"] + [f"{mean[n]:.6f}±{sd[n]:.6f}" for n in METRIC_NAMES]
            )


def score_pair(sample_id: str, pred: np.ndarray, truth: np.ndarray) -> ImageMetrics:
    dsc, jc, ppv, rec = overlap_metrics(pred, truth)
    hd = hausdorff(pred, truth)
    degenerate = bool((pred > 0).any() != (truth > 0).any())
    return ImageMetrics(sample_id, dsc, jc, hd, ppv, rec, hd_is_sentinel=degenerate)


def evaluate_model(model, test_samples: list[Sample], batch_size: int = 8) -> MetricsReport:
    """Per-image metrics of argmax predictions over a labeled test set."""
    from .training import batched, to_image_tensor

    if not test_samples:
        raise ValueError("test set is empty")
    for s in test_samples:
        if s.mask is None:
            raise ValueError(f"test sample {s.id!r} has no mask")
    rows = []
    for chunk in batched(test_samples, batch_size):
        x = to_image_tensor([s.image for s in chunk])
        preds = model.predict_masks(x).numpy()
        for pred, s in zip(preds, chunk):
            rows.append(score_pair(s.id, pred, s.mask))
    return MetricsReport(per_image=rows)


def render_overlay(image: np.ndarray, pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """H,W,3 uint8 overlay: red = over-segmentation, green = under-segmentation,
    yellow = ground-truth contour."""
    p, t = _check_pair(pred, truth)
    base = np.clip(np.asarray(image), 0.0, 1.0)
    if base.ndim == 2:
        base = np.repeat(base[:, :, None], 3, axis=2)
    out = (base * 255).astype(np.float64)
    over = p & ~t
    under = t & ~p
    out[over] = 0.5 * out[over] + 0.5 * np.array([255.0, 0.0, 0.0])
    out[under] = 0.5 * out[under] + 0.5 * np.array([0.0, 255.0, 0.0])
    contour = t & ~binary_erosion(t)
    out[contour] = np.array([255.0, 255.0, 0.0])
    return out.round().astype(np.uint8)

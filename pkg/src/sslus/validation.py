"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_image_array(X) -> np.ndarray:
    """Coerce to a [N,H,W,3] float32 batch in [0,1]; grayscale gets replicated."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = np.repeat(X[..., None], 3, axis=-1)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape [N,H,W] or [N,H,W,3], got {X.shape}")
    if X.shape[1] < 32 or X.shape[2] < 32:
        raise ValueError(f"images must be at least 32x32, got {X.shape[1]}x{X.shape[2]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0,1]")
    return X


def check_mask_array(y, images: np.ndarray) -> np.ndarray:
    """Coerce to a [N,H,W] uint8 batch in {0,1} matching the image batch."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError(f"expected masks of shape [N,H,W], got {y.shape}")
    if y.shape[0] != images.shape[0] or y.shape[1:] != images.shape[1:3]:
        raise ValueError(
            f"mask batch {y.shape} does not match image batch {images.shape[:3]}"
        )
    uniq = np.unique(y)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError(f"masks must be binary, found values {uniq[:10]}")
    return y.astype(np.uint8)

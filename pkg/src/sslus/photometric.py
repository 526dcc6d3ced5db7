"""Image-level flips + color jitter and the per-patch jitter used on patch views."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np


@dataclass(frozen=True)
class JitterSpec:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.4
    flip_prob: float = 0.5

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} factor must be >= 0")
        if self.hue > 0.5:
            raise ValueError(f"hue factor must be <= 0.5, got {self.hue}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0,1], got {self.flip_prob}")


IDENTITY_JITTER = JitterSpec(0.0, 0.0, 0.0, 0.0, flip_prob=0.0)


def _luminance(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def _shift_hue(img: np.ndarray, shift: float) -> np.ndarray:
    # shift is a fraction of the hue circle; cv2 float32 HSV uses degrees
    hsv = cv2.cvtColor(img.astype(np.float32), cv2.COLOR_RGB2HSV)
    hsv[..., 0] = np.mod(hsv[..., 0] + shift * 360.0, 360.0)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def color_jitter(img: np.ndarray, spec: JitterSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply brightness, contrast, saturation, hue jitter in that fixed order.

    Draws exactly four values from rng regardless of which factors are zero,
    so stream consumption is identical for every spec.
    """
    b = rng.uniform(1.0 - spec.brightness, 1.0 + spec.brightness)
    c = rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast)
    s = rng.uniform(1.0 - spec.saturation, 1.0 + spec.saturation)
    h = rng.uniform(-spec.hue, spec.hue)

    out = np.asarray(img, dtype=np.float32)
    out = np.clip(out * b, 0.0, 1.0)
    mean_lum = float(_luminance(out).mean())
    out = np.clip(c * out + (1.0 - c) * mean_lum, 0.0, 1.0)
    gray = _luminance(out)[..., None]
    out = np.clip(s * out + (1.0 - s) * gray, 0.0, 1.0)
    if h != 0.0:
        out = np.clip(_shift_hue(out, h), 0.0, 1.0)
    return out


def random_flip_jitter(img: np.ndarray, spec: JitterSpec, rng: np.random.Generator) -> np.ndarray:
    """Image-level view transform: random horizontal/vertical flip, then color jitter."""
    out = np.asarray(img, dtype=np.float32)
    if rng.random() < spec.flip_prob:
        out = out[:, ::-1]
    if rng.random() < spec.flip_prob:
        out = out[::-1, :]
    return color_jitter(np.ascontiguousarray(out), spec, rng)


def jitter_patches(
    patches: list[np.ndarray], spec: JitterSpec, rng: np.random.Generator
) -> list[np.ndarray]:
    """Independent color jitter per patch; order and count preserved."""
    if not patches:
        raise ValueError("patch list must be non-empty")
    return [color_jitter(p, spec, rng) for p in patches]

"""Center-shifted 2-D DFT and randomized band-stop + X-shaped spectral filters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# inner radius of the spectrum (around DC) that is never filtered
PROTECTED_RADIUS = 10.0
MIN_BAND_RADIUS = 10.0
MAX_BAND_RADIUS = 100.0
X_THICKNESS_MAX = 10.0
X_MIN_OUTER = 20.0  # X-arms are added only when the band reaches past this radius


@dataclass(frozen=True)
class FrequencyFilterSpec:
    band_inner_radius: float
    band_outer_radius: float
    x_thickness: float = 0.0
    x_enabled: bool = False

    def __post_init__(self):
        if self.band_inner_radius < MIN_BAND_RADIUS:
            raise ValueError(f"band_inner_radius must be >= {MIN_BAND_RADIUS}")
        if self.band_outer_radius > MAX_BAND_RADIUS:
            raise ValueError(f"band_outer_radius must be <= {MAX_BAND_RADIUS}")
        if self.band_outer_radius < self.band_inner_radius:
            raise ValueError("band_outer_radius must be >= band_inner_radius")
        if not 0.0 <= self.x_thickness <= X_THICKNESS_MAX:
            raise ValueError(f"x_thickness must be in [0, {X_THICKNESS_MAX}]")
        if self.x_enabled and self.band_outer_radius <= X_MIN_OUTER:
            raise ValueError(
                f"x filter requires band_outer_radius > {X_MIN_OUTER}, "
                f"got {self.band_outer_radius}"
            )


def forward_dft(channel: np.ndarray) -> np.ndarray:
    """2-D DFT of one channel, center-shifted so DC sits at (H//2, W//2)."""
    channel = np.asarray(channel)
    if channel.ndim != 2 or channel.shape[0] < 2 or channel.shape[1] < 2:
        raise ValueError(f"expected a 2-D array with H,W >= 2, got shape {channel.shape}")
    if not np.all(np.isfinite(channel)):
        raise ValueError("input contains non-finite values")
    return np.fft.fftshift(np.fft.fft2(channel))


def inverse_dft(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of forward_dft; returns a complex array (take .real after checking .imag)."""
    return np.fft.ifft2(np.fft.ifftshift(spectrum))


def amplitude_phase(spectrum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.abs(spectrum), np.angle(spectrum)


def point_reflection(arr: np.ndarray) -> np.ndarray:
    """Reflect a center-shifted spectrum/mask through the DC bin.

    Index (i, j) maps to ((2*(H//2) - i) % H, (2*(W//2) - j) % W), which is the
    pairing under which real-image spectra are conjugate-symmetric (the plain
    180-degree array rotation differs on the Nyquist row/column for even sizes).
    """
    h, w = arr.shape[:2]
    flipped = np.flip(arr, (0, 1))
    return np.roll(flipped, ((2 * (h // 2) + 1) % h, (2 * (w // 2) + 1) % w), axis=(0, 1))


def sample_filter_spec(rng: np.random.Generator) -> FrequencyFilterSpec:
    """Draw a random band-stop spec; X-arms only when the band extends past radius 20.

    Three values are always consumed from rng so stream state does not depend
    on the branch taken.
    """
    inner = rng.uniform(MIN_BAND_RADIUS, MAX_BAND_RADIUS)
    outer = rng.uniform(inner, MAX_BAND_RADIUS)
    thickness = rng.uniform(0.0, X_THICKNESS_MAX)
    x_enabled = outer > X_MIN_OUTER
    return FrequencyFilterSpec(
        band_inner_radius=inner,
        band_outer_radius=outer,
        x_thickness=thickness if x_enabled else 0.0,
        x_enabled=x_enabled,
    )


def build_filter_mask(spec: FrequencyFilterSpec, shape: tuple[int, int]) -> np.ndarray:
    """Binary H,W mask for a center-shifted spectrum: 0 in the stop regions, 1 elsewhere.

    Stop regions: the annulus inner <= r <= outer, plus (when enabled) points
    within x_thickness/2 of either diagonal through DC at r > outer. Bins with
    r < 10 are always kept, as is DC itself. The mask is symmetric under
    point_reflection, so filtered spectra of real inputs stay conjugate-symmetric.
    """
    h, w = shape
    fu = (np.arange(h) - h // 2)[:, None].astype(np.float64)
    fv = (np.arange(w) - w // 2)[None, :].astype(np.float64)
    r = np.hypot(fu, fv)
    mask = np.ones((h, w), dtype=np.float64)
    mask[(r >= spec.band_inner_radius) & (r <= spec.band_outer_radius)] = 0.0
    if spec.x_enabled and spec.x_thickness > 0.0:
        half = spec.x_thickness / 2.0
        d1 = np.abs(fu - fv) / np.sqrt(2.0)
        d2 = np.abs(fu + fv) / np.sqrt(2.0)
        mask[(r > spec.band_outer_radius) & ((d1 <= half) | (d2 <= half))] = 0.0
    mask[r < PROTECTED_RADIUS] = 1.0
    return mask


def sample_crop_rect(
    shape: tuple[int, int], rng: np.random.Generator, min_fraction: float = 0.5
) -> tuple[int, int, int, int]:
    """Random (top, left, height, width) covering min_fraction..1.0 of each dimension."""
    h, w = shape
    ch = max(2, int(round(rng.uniform(min_fraction, 1.0) * h)))
    cw = max(2, int(round(rng.uniform(min_fraction, 1.0) * w)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return top, left, ch, cw


def apply_frequency_filter(
    img: np.ndarray, spec: FrequencyFilterSpec, crop: tuple[int, int, int, int]
) -> np.ndarray:
    """Filter the spectrum of the crop region per channel; rest of the image untouched."""
    top, left, ch, cw = crop
    h, w = img.shape[:2]
    if top < 0 or left < 0 or ch < 2 or cw < 2 or top + ch > h or left + cw > w:
        raise ValueError(f"crop {crop} out of bounds for image of shape {img.shape}")
    mask = build_filter_mask(spec, (ch, cw))
    out = np.array(img, dtype=np.float32, copy=True)
    for c in range(img.shape[2]):
        region = img[top : top + ch, left : left + cw, c].astype(np.float64)
        filtered = inverse_dft(forward_dft(region) * mask)
        residual = float(np.abs(filtered.imag).max())
        assert residual < 1e-6, f"imaginary residual {residual} after symmetric filtering"
        out[top : top + ch, left : left + cw, c] = np.clip(filtered.real, 0.0, 1.0)
    return out

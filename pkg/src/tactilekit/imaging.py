"""Low-level image operations shared by calibration and reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_THRESHOLD = 6  # 8-bit units, per channel


class InvalidInputError(ValueError):
    pass


@dataclass
class DifferenceImage:
    values: np.ndarray  # (H, W, 3) int16, sub-threshold channels zeroed
    valid: np.ndarray  # (H, W) bool, any channel above threshold


def difference_image(current, reference, threshold: int = DEFAULT_THRESHOLD) -> DifferenceImage:
    """Signed per-channel difference ``current - reference``.

    Channel magnitudes below ``threshold`` are zeroed; a pixel is valid
    when at least one channel survives.  ``threshold=0`` keeps the raw
    subtraction.
    """
    cur = getattr(current, "pixels", current)
    ref = getattr(reference, "pixels", reference)
    if cur.shape != ref.shape:
        raise InvalidInputError(f"resolution mismatch: {cur.shape} vs {ref.shape}")
    diff = cur.astype(np.int16) - ref.astype(np.int16)
    if threshold > 0:
        diff[np.abs(diff) < threshold] = 0
    valid = np.any(diff != 0, axis=-1)
    return DifferenceImage(diff, valid)


def downsample(pixels: np.ndarray, factor: int = 2) -> np.ndarray:
    """Box-filter downsampling by an integer factor (crops the remainder)."""
    if factor == 1:
        return pixels
    h, w = pixels.shape[:2]
    h2, w2 = h // factor, w // factor
    a = pixels[:h2 * factor, :w2 * factor].astype(np.float32)
    a = a.reshape(h2, factor, w2, factor, *pixels.shape[2:]).mean(axis=(1, 3))
    if pixels.dtype == np.uint8:
        return np.rint(a).astype(np.uint8)
    return a.astype(pixels.dtype)


def quantize_rgb(diff, bits: int = 5) -> np.ndarray:
    """Per-channel bin index of a signed difference in [-256, 255]."""
    shift = 9 - bits
    q = (np.asarray(diff, dtype=np.int32) + 256) >> shift
    return np.clip(q, 0, (1 << bits) - 1)


def rgb_key(diff, bits: int = 5) -> np.ndarray:
    """Flat table key of a signed RGB difference, shape (...,)."""
    q = quantize_rgb(diff, bits)
    return (q[..., 0] << (2 * bits)) | (q[..., 1] << bits) | q[..., 2]


def key_to_bins(keys, bits: int = 5) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    m = (1 << bits) - 1
    return np.stack([(keys >> (2 * bits)) & m, (keys >> bits) & m, keys & m], axis=-1)


def bilinear_sample(img: np.ndarray, cols, rows, fill: float = 0.0) -> np.ndarray:
    """Bilinear lookup of ``img`` at fractional (col, row) positions."""
    h, w = img.shape[:2]
    cols = np.asarray(cols, dtype=float)
    rows = np.asarray(rows, dtype=float)
    inside = (cols >= 0) & (cols <= w - 1) & (rows >= 0) & (rows <= h - 1)
    c = np.clip(cols, 0, w - 1)
    r = np.clip(rows, 0, h - 1)
    c0 = np.minimum(np.floor(c).astype(np.intp), w - 2) if w > 1 else np.zeros_like(c, dtype=np.intp)
    r0 = np.minimum(np.floor(r).astype(np.intp), h - 2) if h > 1 else np.zeros_like(r, dtype=np.intp)
    fc = c - c0
    fr = r - r0
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    out = ((1 - fr) * ((1 - fc) * img[r0, c0] + fc * img[r0, c1])
           + fr * ((1 - fc) * img[r1, c0] + fc * img[r1, c1]))
    return np.where(inside, out, fill)

"""Circle Hough transform on the difference between a frame and the reference."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy import ndimage

from ..imaging import InvalidInputError


class NoContactError(RuntimeError):
    pass


def contact_mask(frame, reference, threshold: float = 6.0, blur: float = 1.0) -> np.ndarray:
    """Filled binary region where the frame departs from the reference."""
    cur = getattr(frame, "pixels", frame)
    ref = getattr(reference, "pixels", reference)
    if cur.shape != ref.shape:
        raise InvalidInputError(f"resolution mismatch: {cur.shape} vs {ref.shape}")
    mag = np.abs(cur.astype(np.float32) - ref.astype(np.float32))
    mag = mag.mean(axis=-1) if mag.ndim == 3 else mag
    if blur > 0:
        mag = ndimage.gaussian_filter(mag, blur)
    mask = mag > threshold
    mask = ndimage.binary_opening(mask, iterations=1)
    return ndimage.binary_fill_holes(mask)


def edge_points(mask: np.ndarray) -> np.ndarray:
    """(row, col) coordinates of the region boundary (inner ring)."""
    edge = mask & ~ndimage.binary_erosion(mask, border_value=0)
    return np.argwhere(edge)


@lru_cache(maxsize=512)
def circle_offsets(r: int):
    """Distinct (row, col) offsets of a rasterised circle of radius ``r``.

    Distinct offsets give each edge point at most one vote per cell.
    """
    n = max(16, int(math.ceil(2 * math.pi * r)))
    th = np.linspace(0, 2 * math.pi, n, endpoint=False)
    off = np.unique(np.stack([np.rint(r * np.sin(th)), np.rint(r * np.cos(th))], axis=1).astype(np.int64), axis=0)
    return off[:, 0], off[:, 1]


def hough_accumulate(edges: np.ndarray, r_min: int, r_max: int, shape=None):
    """Vote for circle centres of every integer radius in [r_min, r_max].

    Returns (accumulator[r, row, col], row_offset, col_offset) where the
    accumulator spans the edge bounding box grown by r_max.
    """
    radii = np.arange(int(r_min), int(r_max) + 1)
    lo = edges.min(axis=0) - r_max
    hi = edges.max(axis=0) + r_max
    if shape is not None:
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, np.asarray(shape[:2]) - 1)
    h, w = hi - lo + 1
    acc = np.zeros((len(radii), h, w), dtype=np.int32)
    er = edges[:, 0].astype(np.int64)
    ec = edges[:, 1].astype(np.int64)
    for i, r in enumerate(radii):
        dr, dc = circle_offsets(int(r))
        rr = er[:, None] - lo[0] - dr[None, :]
        cc = ec[:, None] - lo[1] - dc[None, :]
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        acc[i] = np.bincount(rr[ok] * w + cc[ok], minlength=h * w).reshape(h, w)
    return acc, radii, lo


def fit_circle(points: np.ndarray):
    """Algebraic least-squares circle through (row, col) points."""
    y = points[:, 0].astype(float)
    x = points[:, 1].astype(float)
    A = np.stack([x, y, np.ones_like(x)], axis=1)
    b = x * x + y * y
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    cx, cy = sol[0] / 2, sol[1] / 2
    r = math.sqrt(max(sol[2] + cx * cx + cy * cy, 0.0))
    return cx, cy, r


def detect_circle(frame, reference, radius_range=(5, 80), threshold: float = 6.0,
                  min_support: float = 0.12, refine: bool = True):
    """Strongest circle in the difference image.

    The accumulator peak locates the contact; with ``refine`` the centre
    and radius are then re-estimated by a least-squares circle through the
    whole boundary of the contact region that carries the peak, which
    keeps the centre unbiased when perspective squashes the disc into an
    ellipse.  Returns ((col, row), radius) in pixels; the radius refers to
    the region boundary, half a pixel outside the innermost edge ring.
    Raises :class:`NoContactError` when no circle collects at least
    ``min_support`` of its circumference in votes.
    """
    mask = contact_mask(frame, reference, threshold)
    edges = edge_points(mask)
    if len(edges) < 8:
        raise NoContactError("no contact edges in difference image")
    r_min, r_max = int(math.floor(radius_range[0])), int(math.ceil(radius_range[1]))
    acc, radii, lo = hough_accumulate(edges, r_min, r_max, mask.shape)
    i, row, col = np.unravel_index(np.argmax(acc), acc.shape)
    if acc[i, row, col] < min_support * 2 * math.pi * radii[i]:
        raise NoContactError("no circle above vote threshold")
    cx, cy, r = float(col + lo[1]), float(row + lo[0]), float(radii[i])
    if not refine:
        return (cx, cy), r
    labels, _ = ndimage.label(mask)
    d = np.hypot(edges[:, 1] - cx, edges[:, 0] - cy)
    voters = labels[edges[:, 0], edges[:, 1]][np.abs(d - r) <= 1.0]
    if len(voters):
        lab = np.bincount(voters).argmax()
        ring = edges[labels[edges[:, 0], edges[:, 1]] == lab]
        if len(ring) >= 8:
            cx, cy, r = fit_circle(ring)
    return (cx, cy), r + 0.5

"""Frame -> point cloud: difference image, table lookup, Poisson, warp, write-back."""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass

import cv2
import numpy as np

from .calibration.bundle import CalibrationBundle
from .calibration.procedure import pixel_quad_map
from .imaging import DifferenceImage, InvalidInputError, bilinear_sample, difference_image, downsample, rgb_key
from .poisson import integrate_gradients

log = logging.getLogger(__name__)


@dataclass
class GradientField:
    gx: np.ndarray  # mm per pixel along columns
    gy: np.ndarray  # mm per pixel along rows
    valid: np.ndarray

    @property
    def shape(self):
        return self.gx.shape


@dataclass
class HeightMap:
    values: np.ndarray  # mm, displacement into the gel
    clamp_fraction: float = 0.0

    @property
    def resolution(self) -> tuple:
        return (self.values.shape[1], self.values.shape[0])


@dataclass
class ReconstructedCloud:
    points: np.ndarray
    displacement: np.ndarray
    quad_id: np.ndarray
    uv: np.ndarray
    timestamp: int = 0
    sequence: int = 0

    def __len__(self):
        return len(self.points)

    @property
    def peak(self) -> float:
        return float(self.displacement.max()) if len(self.displacement) else 0.0

    @property
    def peak_index(self) -> int:
        return int(np.argmax(self.displacement))


def quad_index_map(bundle: CalibrationBundle) -> np.ndarray:
    """Quad id of every image pixel (-1 outside the calibrated region).

    Pixels on a shared edge go to the lower id.
    """
    return pixel_quad_map(bundle.vertex_pixels, bundle.tessellation, bundle.resolution)


def dense_tables(bundle: CalibrationBundle, k: int = 4) -> np.ndarray:
    """(Q * 2**(3*bits), 2) float32 gradient table covering every key of every quad."""
    return np.concatenate([t.dense(k) for t in bundle.tables]).astype(np.float32)


def gradients_from_frame(diff: DifferenceImage, bundle: CalibrationBundle, qmap=None,
                         table=None, jmap=None) -> GradientField:
    """Map every valid pixel through its quad's table; everything else gets (0, 0).

    Slope tables go through the per-pixel Jacobian ``jmap`` (computed from
    the bundle when not given) to become mm/px gradients.
    """
    qmap = quad_index_map(bundle) if qmap is None else qmap
    table = dense_tables(bundle) if table is None else table
    if jmap is None and bundle.jacobian is not None:
        jmap = bundle.gradient_maps()
    if diff.valid.shape != qmap.shape:
        raise InvalidInputError(f"frame {diff.valid.shape} does not match bundle {qmap.shape}")
    bits = bundle.quantization_bits
    valid = diff.valid & (qmap >= 0)
    idx = qmap.astype(np.int64) << (3 * bits)
    idx += rgb_key(diff.values, bits)
    g = table[np.where(valid, idx, 0)]
    g[~valid] = 0
    if jmap is None:
        return GradientField(g[..., 0], g[..., 1], valid)
    su, sv = g[..., 0], g[..., 1]
    gx = su * jmap[..., 0, 0] + sv * jmap[..., 1, 0]
    gy = su * jmap[..., 0, 1] + sv * jmap[..., 1, 1]
    return GradientField(gx, gy, valid)


def poisson_solve(field: GradientField, clamp: bool = True) -> HeightMap:
    """Integrate a gradient field with a zero boundary; negative heights are clamped."""
    if field.gx.ndim != 2 or field.gx.shape != field.gy.shape:
        raise InvalidInputError("gradient field must be two matching 2-D arrays")
    h = integrate_gradients(field.gx, field.gy)
    frac = 0.0
    if clamp:
        neg = h < 0
        frac = float(neg.mean())
        h[neg] = 0.0
    return HeightMap(h, frac)


def warp_patch(height: HeightMap, quad_id: int, bundle: CalibrationBundle) -> np.ndarray:
    """Height patch of one quad resampled onto its rectified grid.

    The sampling map is the inverse homography of each rectified grid
    position (plus the bundle's lens correction), as stored per reference point.
    """
    rows, cols = (int(x) for x in bundle.rectified_resolution[quad_id])
    vals = np.ascontiguousarray(getattr(height, "values", height), dtype=np.float64)
    src = bundle.cloud.pixels[bundle.cloud.quad_id == quad_id].reshape(rows, cols, 2)
    mapx = np.ascontiguousarray(src[..., 0], dtype=np.float32)
    mapy = np.ascontiguousarray(src[..., 1], dtype=np.float32)
    return cv2.remap(vals, mapx, mapy, cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def update_cloud(patches, bundle: CalibrationBundle) -> ReconstructedCloud:
    """Move every reference point inward along its normal by its patch height."""
    disp = np.concatenate([np.asarray(p, dtype=float).ravel() for p in patches])
    if len(disp) != len(bundle.cloud):
        raise InvalidInputError(f"patches cover {len(disp)} points, cloud has {len(bundle.cloud)}")
    disp = np.maximum(disp, 0.0)
    return _displace(bundle, disp)


def _displace(bundle: CalibrationBundle, disp) -> ReconstructedCloud:
    c = bundle.cloud
    pts = c.points - disp[:, None] * c.normals
    return ReconstructedCloud(pts, disp, c.quad_id, c.uv)


class Reconstructor:
    """Hot-path reconstruction with everything frame-independent precomputed.

    With ``downsample`` > 1 full-size frames are box-filtered first and a
    matching reduced bundle is used.  Per-quad warping is folded into one
    bilinear gather at each reference point's source pixel.
    """

    def __init__(self, bundle: CalibrationBundle, downsample: int = 1, history: int = 256):
        self.full_resolution = bundle.resolution
        self.factor = int(downsample)
        self.bundle = bundle.downsampled(self.factor) if self.factor > 1 else bundle
        b = self.bundle
        self.reference = b.reference_frame.pixels
        self.qmap = quad_index_map(b)
        self.table = dense_tables(b)
        jm = b.gradient_maps()
        self.jmap = None if jm is None else jm.astype(np.float32)
        self.src = b.cloud.pixels.astype(np.float64)
        self.timings = deque(maxlen=history)
        self.last_height = None

    def prepare(self, frame) -> np.ndarray:
        pix = getattr(frame, "pixels", frame)
        if self.factor > 1 and (pix.shape[1], pix.shape[0]) == tuple(self.full_resolution):
            pix = downsample(pix, self.factor)
        if pix.shape != self.reference.shape:
            raise InvalidInputError(f"frame shape {pix.shape} does not match {self.reference.shape}")
        return pix

    def height_map(self, frame) -> HeightMap:
        diff = difference_image(self.prepare(frame), self.reference, self.bundle.threshold)
        field = gradients_from_frame(diff, self.bundle, self.qmap, self.table, self.jmap)
        return poisson_solve(field)

    def __call__(self, frame) -> ReconstructedCloud:
        t0 = time.perf_counter()
        hm = self.height_map(frame)
        disp = bilinear_sample(hm.values, self.src[:, 0], self.src[:, 1])
        np.maximum(disp, 0.0, out=disp)
        cloud = _displace(self.bundle, disp)
        cloud.timestamp = getattr(frame, "timestamp", 0)
        cloud.sequence = getattr(frame, "sequence", 0)
        self.last_height = hm
        self.timings.append(time.perf_counter() - t0)
        return cloud

    @property
    def mean_frame_time(self) -> float:
        return float(np.mean(self.timings)) if self.timings else float("nan")


def reconstruct(frame, bundle: CalibrationBundle) -> ReconstructedCloud:
    """One-shot reconstruction through the per-quad warp path."""
    diff = difference_image(frame, bundle.reference_frame, bundle.threshold)
    hm = poisson_solve(gradients_from_frame(diff, bundle))
    return update_cloud([warp_patch(hm, q, bundle) for q in range(bundle.n_quads)], bundle)

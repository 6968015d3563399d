"""Poke schedule, contact detection and bundle assembly against the simulator."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from matplotlib.path import Path as PolyPath
from scipy.interpolate import RBFInterpolator, griddata

from ..geometry import FingertipSurface, Tessellation, tessellate
from ..imaging import DEFAULT_THRESHOLD, difference_image
from ..optics import (CameraModel, IlluminationModel, Renderer, SensorFrame, default_camera,
                      membrane_extent)
from .bundle import CalibrationBundle, LensCorrection, SlopeJacobian, correspondence_from_vertices
from .homography import SingularHomographyError
from .hough import NoContactError, detect_circle
from .lut import TableBuilder, TableMissingError, cap_gradient, cap_gradient_affine

log = logging.getLogger(__name__)


class CalibrationIncompleteError(RuntimeError):
    def __init__(self, message, vertex=None):
        super().__init__(message)
        self.vertex = vertex


@dataclass(frozen=True)
class PokeTarget:
    kind: str  # "vertex" or "gradient"
    uv: tuple
    point: np.ndarray
    normal: np.ndarray  # outward; the probe approaches along -normal
    quad_id: int = -1
    vertex: tuple | None = None  # (iu, iv) for vertex pokes
    depth: float = 0.8


@dataclass
class PokeRecord:
    target: PokeTarget
    frame: SensorFrame
    detected_center: tuple | None
    detected_radius: float
    quad_id: int

    @property
    def commanded_target(self):
        return self.target.point

    @property
    def detected(self) -> bool:
        return self.detected_center is not None and self.detected_radius > 0


def plan_poke_schedule(tess: Tessellation, per_quad: int = 5, depth: float = 0.8,
                       seed: int = 0, margin: float = 0.2, gradient_depths=None) -> list:
    """Vertex pokes (one per grid vertex) followed by ``per_quad`` interior pokes per quad.

    Interior locations are drawn uniformly from the central part of each
    quad (``margin`` of its extent left free on each side).  When
    ``gradient_depths`` is given, interior pokes cycle through it.
    """
    if per_quad < 1:
        raise ValueError("per_quad must be >= 1")
    s = tess.surface
    out = []
    for iu in range(tess.n_u + 1):
        for iv in range(tess.n_v + 1):
            u, v = iu / tess.n_u, iv / tess.n_v
            out.append(PokeTarget("vertex", (u, v), s.point(u, v), s.normal(u, v),
                                  vertex=(iu, iv), depth=depth))
    rng = np.random.default_rng(seed)
    depths = list(gradient_depths) if gradient_depths else [depth]
    k = 0
    for quad in tess:
        lo, hi = quad.uv_min, quad.uv_max
        for _ in range(per_quad):
            f = rng.uniform(margin, 1 - margin, 2)
            u, v = lo + f * (hi - lo)
            out.append(PokeTarget("gradient", (float(u), float(v)), s.point(u, v), s.normal(u, v),
                                  quad_id=quad.id, depth=float(depths[k % len(depths)])))
            k += 1
    return out


def hough_radius_range(surface: FingertipSurface, camera: CameraModel, probe_radius: float,
                       depths, slack: float = 0.3) -> tuple:
    """Pixel radius range for contact discs over the sensed surface, +-slack."""
    uu, vv = np.meshgrid(np.linspace(0, 1, 21), np.linspace(0, 1, 21))
    pts = surface.point(uu.ravel(), vv.ravel())
    dist = np.linalg.norm(pts - camera.center, axis=1)
    a = [membrane_extent(probe_radius, d) for d in depths]
    lo = camera.focal * min(a) / dist.max() * (1 - slack)
    hi = camera.focal * max(a) / dist.min() * (1 + slack)
    return max(2.0, lo), hi


def quad_polygons(tess: Tessellation, vertex_pixels) -> list:
    return [PolyPath(vertex_pixels[list(tess.quad_vertex_indices(q.id))]) for q in tess]


def pixel_quad_map(vertex_pixels, tess: Tessellation, resolution) -> np.ndarray:
    """Quad id of every image pixel (-1 outside the calibrated region).

    Pixels on a shared edge go to the lower id.
    """
    w, h = resolution
    qmap = np.full((h, w), -1, dtype=np.int32)
    cols, rows = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pts = np.stack([cols.ravel(), rows.ravel()], axis=1)
    flat = qmap.ravel()
    vertex_pixels = np.asarray(vertex_pixels, dtype=float)
    for q in reversed(range(len(tess))):
        corners = vertex_pixels[list(tess.quad_vertex_indices(q))]
        lo = np.floor(corners.min(axis=0)).astype(int)
        hi = np.ceil(corners.max(axis=0)).astype(int)
        box = np.flatnonzero((pts[:, 0] >= lo[0]) & (pts[:, 0] <= hi[0])
                             & (pts[:, 1] >= lo[1]) & (pts[:, 1] <= hi[1]))
        inside = PolyPath(corners).contains_points(pts[box], radius=1e-6) | \
            PolyPath(corners[::-1]).contains_points(pts[box], radius=1e-6)
        flat[box[inside]] = q
    return qmap


def locate_quad(polys, point) -> int:
    """Id of the first quad whose image polygon contains ``point``, or -1."""
    for i, p in enumerate(polys):
        if p.contains_point(point, radius=1e-9):
            return i
    return -1


def build_correspondence(vertex_pokes, tess: Tessellation):
    """Homographies, rectified sizes and reference cloud from vertex pokes.

    Returns (vertex_pixels, homographies, rectified_resolution, cloud).
    """
    nv = (tess.n_u + 1) * (tess.n_v + 1)
    vp = np.full((nv, 2), np.nan)
    for rec in vertex_pokes:
        if rec.target.vertex is None or not rec.detected:
            continue
        vp[tess.vertex_index(*rec.target.vertex)] = rec.detected_center
    missing = np.flatnonzero(np.isnan(vp[:, 0]))
    if len(missing):
        i = int(missing[0])
        vert = (i // (tess.n_v + 1), i % (tess.n_v + 1))
        raise CalibrationIncompleteError(f"vertex {vert} has no detected image location", vert)
    try:
        homs, res, cloud = correspondence_from_vertices(tess.surface, tess, vp)
    except SingularHomographyError as exc:
        raise CalibrationIncompleteError(f"degenerate quad in correspondence: {exc}") from exc
    return vp, homs, res, cloud


class ImageSurfaceMap:
    """Smooth image -> (u, v) map fitted through all poke correspondences.

    Each detected poke centre is paired with its commanded surface point;
    a thin-plate spline interpolates between them.  Its derivative gives
    the local pixel -> tangent-plane (mm) Jacobian used for slopes.
    """

    def __init__(self, surface: FingertipSurface, pixels, uv, smoothing: float = 1e-3):
        self.surface = surface
        self._rbf = RBFInterpolator(np.asarray(pixels, float), np.asarray(uv, float),
                                    kernel="thin_plate_spline", smoothing=smoothing)

    def uv(self, pixels) -> np.ndarray:
        return self._rbf(np.atleast_2d(np.asarray(pixels, float)))

    def jacobian(self, pixel, step: float = 0.5) -> np.ndarray:
        return self.jacobians(np.atleast_2d(np.asarray(pixel, float)), step)[0]

    def jacobians(self, pixels, step: float = 0.5) -> np.ndarray:
        """(N, 2, 2) central-difference Jacobians at (col, row) ``pixels``."""
        p = np.asarray(pixels, float).reshape(-1, 2)
        offs = np.array([[0, 0], [step, 0], [-step, 0], [0, step], [0, -step]])
        uv = self.uv((p[:, None, :] + offs).reshape(-1, 2)).reshape(len(p), 5, 2)
        pts = self.surface.point(uv[..., 0], uv[..., 1])
        tu, tv, _ = self.surface.frame(uv[:, 0, 0], uv[:, 0, 1])
        tu, tv = np.asarray(tu).reshape(-1, 3), np.asarray(tv).reshape(-1, 3)
        dc = (pts[:, 1] - pts[:, 2]) / (2 * step)
        dr = (pts[:, 3] - pts[:, 4]) / (2 * step)
        dot = lambda a, b: np.sum(a * b, axis=-1)
        return np.stack([np.stack([dot(dc, tu), dot(dr, tu)], -1),
                         np.stack([dot(dc, tv), dot(dr, tv)], -1)], axis=1)

    def jacobian_grid(self, resolution, stride: int = 8) -> SlopeJacobian:
        w, h = resolution
        cols = np.unique(np.r_[np.arange(0, w, stride), w - 1]).astype(float)
        rows = np.unique(np.r_[np.arange(0, h, stride), h - 1]).astype(float)
        cc, rr = np.meshgrid(cols, rows)
        J = self.jacobians(np.stack([cc.ravel(), rr.ravel()], axis=1))
        return SlopeJacobian(cols, rows, J.reshape(len(rows), len(cols), 2, 2))


def poke_gradient_samples(rec: PokeRecord, reference: SensorFrame, probe_radius: float,
                          threshold: int = DEFAULT_THRESHOLD, jacobian=None, return_pixels: bool = False,
                          slope: bool = False):
    """(diff RGB, gradient) pairs for the in-contact pixels of one poke.

    Without a ``jacobian`` the detected circle fixes an isotropic
    mm-per-pixel scale; with one, the local image-to-surface map does and
    contact membership comes from the probe geometry, and ``slope`` keeps
    the samples as tangent-plane slopes.  ``return_pixels`` adds the
    (row, col) of every sample.
    """
    diff = difference_image(rec.frame, reference, threshold)
    cx, cy = rec.detected_center
    r = rec.detected_radius
    if jacobian is not None:
        a = membrane_extent(probe_radius, rec.target.depth)
        r = max(r, a * float(np.abs(np.linalg.inv(jacobian)).sum(axis=1).max())) + 1
    h, w = diff.valid.shape
    r0, r1 = max(0, int(cy - r - 1)), min(h, int(cy + r + 2))
    c0, c1 = max(0, int(cx - r - 1)), min(w, int(cx + r + 2))
    rr, cc = np.mgrid[r0:r1, c0:c1]
    dc, dr = (cc - cx).ravel(), (rr - cy).ravel()
    valid = diff.valid[r0:r1, c0:c1].ravel()
    rgb = diff.values[r0:r1, c0:c1].reshape(-1, 3)
    pix = np.stack([rr.ravel(), cc.ravel()], axis=1)
    if jacobian is None:
        inside = (dc * dc + dr * dr < r * r) & valid
        g = cap_gradient(dc[inside], dr[inside], r, probe_radius, rec.target.depth)
    else:
        g, inside = cap_gradient_affine(dc, dr, jacobian, probe_radius, rec.target.depth, slope)
        inside &= valid
        g = g[inside]
    if return_pixels:
        return rgb[inside], g, pix[inside]
    return rgb[inside], g


def fit_lens_correction(cloud, records, smoothing: float = 1e-3) -> LensCorrection:
    """Offsets between detected poke centres and the homography sampling map.

    The homography-based pixel of each poke's (u, v) is interpolated
    linearly from the dense reference cloud.
    """
    uv = np.array([r.target.uv for r in records], dtype=float)
    det = np.array([r.detected_center for r in records], dtype=float)
    pred = griddata(cloud.uv, cloud.pixels, uv, method="linear")
    ok = np.isfinite(pred[:, 0])
    return LensCorrection(uv[ok], det[ok] - pred[ok], smoothing)


def build_lookup_table(gradient_pokes, probe_radius: float, reference: SensorFrame,
                       n_quads: int, polys=None, bits: int = 5,
                       threshold: int = DEFAULT_THRESHOLD, jacobian_fn=None, qmap=None,
                       slope: bool = False) -> tuple:
    """Per-quad lookup tables from detected gradient pokes.

    A poke whose detected centre lies in a different quad than commanded
    is credited to the containing quad.  ``jacobian_fn(center)`` switches
    the per-pixel slope model to a local image-to-surface map; ``slope``
    then stores tangent-plane slopes instead of mm/px gradients.  With a
    pixel -> quad ``qmap`` every sample is credited to the quad of its own
    pixel (the same rule the lookup uses) instead of the poke's quad.
    """
    builder = TableBuilder(bits)
    for rec in gradient_pokes:
        if not rec.detected:
            continue
        if polys is not None:
            q = locate_quad(polys, rec.detected_center)
            if q >= 0 and q != rec.quad_id:
                log.info("poke at %s reassigned from quad %d to %d", rec.target.uv, rec.quad_id, q)
                rec.quad_id = q
        J = jacobian_fn(rec.detected_center) if jacobian_fn else None
        rgb, g, pix = poke_gradient_samples(rec, reference, probe_radius, threshold, J, True,
                                              slope and J is not None)
        if not len(g):
            continue
        if qmap is None:
            builder.add(rec.quad_id, rgb, g)
            continue
        owner = qmap[pix[:, 0], pix[:, 1]]
        owner = np.where(owner < 0, rec.quad_id, owner)
        for q in np.unique(owner):
            m = owner == q
            builder.add(int(q), rgb[m], g[m])
    tables = []
    for q in range(n_quads):
        if q not in builder.quads():
            raise TableMissingError(q)
        tables.append(builder.table(q))
    return tuple(tables)


@dataclass
class CalibrationSettings:
    cylinder_radius: float = 10.0
    cylinder_length: float = 15.0
    n_u: int = 6
    n_v: int = 4
    resolution: tuple = (640, 480)
    probe_radius: float = 2.0
    depth: float = 0.8
    gradient_depths: tuple = (0.4, 0.8, 1.2, 1.6)
    per_quad: int = 5
    noise_sigma: float = 1.0
    threshold: int = DEFAULT_THRESHOLD
    quantization_bits: int = 5
    slope_model: str = "surface"  # or "circle"
    lens_correction: bool = True
    seed: int = 0


@dataclass
class CalibrationReport:
    vertex_pokes: int = 0
    gradient_pokes: int = 0
    detection_failures: list = field(default_factory=list)
    reassigned: int = 0
    table_sizes: list = field(default_factory=list)
    runtime_s: float = 0.0

    def to_dict(self) -> dict:
        return {"vertex_pokes": self.vertex_pokes, "gradient_pokes": self.gradient_pokes,
                "total_pokes": self.vertex_pokes + self.gradient_pokes,
                "detection_failures": self.detection_failures, "reassigned": self.reassigned,
                "table_sizes": self.table_sizes, "runtime_s": round(self.runtime_s, 3)}


def make_simulator(settings: CalibrationSettings, illumination: IlluminationModel | None = None):
    surface = FingertipSurface(settings.cylinder_radius, settings.cylinder_length)
    camera = default_camera(surface, tuple(settings.resolution))
    return Renderer(surface, camera, illumination)


def run_poke(renderer: Renderer, target: PokeTarget, probe_radius: float, radius_range,
             rng, noise_sigma: float = 0.0, threshold: int = DEFAULT_THRESHOLD,
             reference: SensorFrame | None = None) -> PokeRecord:
    state = renderer.poke_state(target.point, probe_radius, target.depth)
    frame = renderer.render(state, noise_sigma=noise_sigma, rng=rng, timestamp=0)
    ref = reference if reference is not None else renderer.reference_frame()
    try:
        center, radius = detect_circle(frame, ref, radius_range, threshold)
    except NoContactError:
        center, radius = None, 0.0
    return PokeRecord(target, frame, center, radius, target.quad_id)


def calibrate(settings: CalibrationSettings | None = None, renderer: Renderer | None = None):
    """Run the full poke schedule on the simulator and assemble a bundle.

    Returns (bundle, report).  Deterministic for a given seed.
    """
    settings = settings or CalibrationSettings()
    t0 = time.perf_counter()
    renderer = renderer or make_simulator(settings)
    surface, camera = renderer.surface, renderer.camera
    tess = tessellate(surface, settings.n_u, settings.n_v)
    reference = renderer.reference_frame()
    rng = np.random.default_rng(settings.seed)
    schedule = plan_poke_schedule(tess, settings.per_quad, settings.depth, settings.seed,
                                  gradient_depths=settings.gradient_depths or None)
    depths = {t.depth for t in schedule}
    rrange = hough_radius_range(surface, camera, settings.probe_radius, depths)
    report = CalibrationReport()

    vertex_recs, grad_recs = [], []
    for target in schedule:
        rec = run_poke(renderer, target, settings.probe_radius, rrange, rng,
                       settings.noise_sigma, settings.threshold, reference)
        if not rec.detected:
            report.detection_failures.append({"kind": target.kind, "uv": list(target.uv)})
            log.warning("no contact detected for %s poke at uv=%s", target.kind, target.uv)
        if target.kind == "vertex":
            vertex_recs.append(rec)
        else:
            grad_recs.append(rec)
    report.vertex_pokes = len(vertex_recs)
    report.gradient_pokes = len(grad_recs)

    vp, homs, res, cloud = build_correspondence(vertex_recs, tess)
    correction = None
    if settings.lens_correction:
        correction = fit_lens_correction(cloud, [r for r in vertex_recs + grad_recs if r.detected])
        homs, res, cloud = correspondence_from_vertices(surface, tess, vp, correction)
    polys = quad_polygons(tess, vp)
    before = [r.quad_id for r in grad_recs]
    jac, slope_map = None, None
    if settings.slope_model == "surface":
        found = [r for r in vertex_recs + grad_recs if r.detected]
        smap = ImageSurfaceMap(surface, [r.detected_center for r in found],
                               [r.target.uv for r in found])
        jac = smap.jacobian
        slope_map = smap.jacobian_grid(camera.resolution)
    tables = build_lookup_table(grad_recs, settings.probe_radius, reference, len(tess), polys,
                                settings.quantization_bits, settings.threshold, jac,
                                pixel_quad_map(vp, tess, camera.resolution), slope=slope_map is not None)
    report.reassigned = sum(a != r.quad_id for a, r in zip(before, grad_recs))
    report.table_sizes = [len(t) for t in tables]
    report.runtime_s = time.perf_counter() - t0
    bundle = CalibrationBundle(
        surface=surface, n_u=settings.n_u, n_v=settings.n_v, camera=camera,
        vertex_pixels=vp, homographies=homs, rectified_resolution=res, tables=tables,
        cloud=cloud, reference_frame=reference, probe_radius=settings.probe_radius,
        quantization_bits=settings.quantization_bits, threshold=settings.threshold,
        jacobian=slope_map,
        meta={"seed": settings.seed, "per_quad": settings.per_quad, "depth": settings.depth,
              "gradient_depths": list(settings.gradient_depths),
              "noise_sigma": settings.noise_sigma, "slope_model": settings.slope_model,
              "downsample": 1,
              "vertex_pokes": report.vertex_pokes, "gradient_pokes": report.gradient_pokes},
        correction=correction)
    return bundle, report


def random_probe_targets(tess: Tessellation, n: int, rng, depth_range=(0.3, 1.5),
                         probe_radius: float = 2.0) -> list:
    """Unseen test pokes: a random quad, a random depth, and a location in
    that quad whose whole membrane footprint stays on the sensed surface."""
    s = tess.surface
    span = np.array([s.sensed_arc_length, s.cylinder_radius * s.sector_rad])  # mm along u, v
    out = []
    for _ in range(n):
        q = int(rng.integers(len(tess)))
        quad = tess[q]
        d = float(rng.uniform(*depth_range))
        pad = membrane_extent(probe_radius, d) / span
        lo = np.maximum(quad.uv_min, pad)
        hi = np.minimum(quad.uv_max, 1 - pad)
        hi = np.maximum(hi, lo)
        u, v = lo + rng.uniform(0, 1, 2) * (hi - lo)
        out.append(PokeTarget("test", (float(u), float(v)), s.point(u, v), s.normal(u, v),
                              quad_id=q, depth=d))
    return out

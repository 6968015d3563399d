"""Calibration bundle: homographies, reference cloud and lookup tables.

On disk the bundle is a small versioned container (magic, JSON header,
raw little-endian arrays) plus a JSON sidecar with human-readable
metadata.  Writing is deterministic: identical bundles give identical
bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..geometry import FingertipSurface, Tessellation, project_grid, tessellate
from ..imaging import downsample
from scipy.interpolate import RBFInterpolator, RegularGridInterpolator

from ..optics import CameraModel, SensorFrame
from .homography import apply_homography, patch_homography
from .lut import LookupTable

MAGIC = b"TKBUNDLE"
FORMAT_VERSION = 1


class BundleFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceCloud:
    points: np.ndarray  # (N, 3) mm, sensor frame
    normals: np.ndarray  # (N, 3) outward
    uv: np.ndarray  # (N, 2)
    quad_id: np.ndarray  # (N,)
    pixels: np.ndarray  # (N, 2) source image (col, row) of each point

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class LensCorrection:
    """Smooth pixel offsets added to the per-quad homography sampling maps.

    A homography keeps straight lines straight, so inside a quad it
    cannot follow a wide-angle lens.  The offsets between detected poke
    centres and the homography prediction at the same (u, v) are
    interpolated with a thin-plate spline over (u, v).
    """
    uv: np.ndarray  # (K, 2) control points
    offsets: np.ndarray  # (K, 2) pixels (col, row)
    smoothing: float = 1e-3

    def __call__(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        flat = uv.reshape(-1, 2)
        rbf = RBFInterpolator(self.uv, self.offsets, kernel="thin_plate_spline", smoothing=self.smoothing)
        return rbf(flat).reshape(uv.shape)

    def scaled(self, factor: float) -> "LensCorrection":
        return LensCorrection(self.uv, self.offsets * factor, self.smoothing)


@dataclass(frozen=True)
class SlopeJacobian:
    """Pixel -> tangent-plane (mm) Jacobian sampled on a coarse image grid.

    ``values[i, j]`` is the 2x2 map from a (col, row) pixel offset at
    (``cols[j]``, ``rows[i]``) to (t_u, t_v) millimetres.  Tables built
    with it hold surface slopes; ``gradient_maps`` turns those back into
    per-pixel gradients.
    """
    cols: np.ndarray  # (nc,)
    rows: np.ndarray  # (nr,)
    values: np.ndarray  # (nr, nc, 2, 2)

    def dense(self, resolution) -> np.ndarray:
        """(h, w, 2, 2) bilinear upsampling onto every pixel (edges clamp)."""
        w, h = resolution
        interp = RegularGridInterpolator((self.rows, self.cols), self.values.reshape(len(self.rows), len(self.cols), 4))
        cc, rr = np.meshgrid(np.clip(np.arange(w, dtype=float), self.cols[0], self.cols[-1]),
                             np.clip(np.arange(h, dtype=float), self.rows[0], self.rows[-1]))
        return interp(np.stack([rr.ravel(), cc.ravel()], axis=1)).reshape(h, w, 2, 2)

    def scaled(self, factor: float) -> "SlopeJacobian":
        """Same map for frames box-filtered by ``factor``."""
        return SlopeJacobian((self.cols + 0.5) / factor - 0.5, (self.rows + 0.5) / factor - 0.5,
                             self.values * factor)


@dataclass(frozen=True)
class CalibrationBundle:
    surface: FingertipSurface
    n_u: int
    n_v: int
    camera: CameraModel
    vertex_pixels: np.ndarray  # (V, 2) detected (col, row) of every grid vertex
    homographies: np.ndarray  # (Q, 3, 3) image -> rectified patch
    rectified_resolution: np.ndarray  # (Q, 2) rows, cols
    tables: tuple
    cloud: ReferenceCloud
    reference_frame: SensorFrame
    probe_radius: float = 2.0
    quantization_bits: int = 5
    threshold: int = 6
    meta: dict = field(default_factory=dict)
    correction: LensCorrection | None = None
    jacobian: SlopeJacobian | None = None  # set when the tables hold surface slopes

    @property
    def table_units(self) -> str:
        return "slope" if self.jacobian is not None else "mm_per_px"

    def gradient_maps(self) -> np.ndarray | None:
        """(h, w, 2, 2) per-pixel slope -> gradient map, or None for mm/px tables."""
        return None if self.jacobian is None else self.jacobian.dense(self.resolution)

    @property
    def tessellation(self) -> Tessellation:
        return tessellate(self.surface, self.n_u, self.n_v)

    @property
    def n_quads(self) -> int:
        return self.n_u * self.n_v

    @property
    def resolution(self) -> tuple:
        return self.camera.resolution

    def quad_corners(self, quad_id: int) -> np.ndarray:
        idx = self.tessellation.quad_vertex_indices(quad_id)
        return self.vertex_pixels[list(idx)]

    def downsampled(self, factor: int = 2) -> "CalibrationBundle":
        """Bundle for frames box-filtered by ``factor``.

        Pixel coordinates shrink, the per-quad grids are rebuilt at the
        smaller rectified size and mm/px table gradients (or the slope
        Jacobian) grow by ``factor``.
        """
        if factor == 1:
            return self
        camera = self.camera.scaled(1.0 / factor)
        vp = (self.vertex_pixels + 0.5) / factor - 0.5
        tess = self.tessellation
        corr = self.correction.scaled(1.0 / factor) if self.correction is not None else None
        homs, res, cloud = correspondence_from_vertices(self.surface, tess, vp, corr)
        ref = SensorFrame(downsample(self.reference_frame.pixels, factor), 0, 0)
        jac = None
        if self.jacobian is not None:
            jac = self.jacobian.scaled(factor)
            tables = self.tables
        else:
            tables = tuple(t.scaled(factor) for t in self.tables)
        meta = dict(self.meta, downsample=factor * self.meta.get("downsample", 1))
        return replace(self, camera=camera, vertex_pixels=vp, homographies=homs,
                       rectified_resolution=res, tables=tables, cloud=cloud,
                       reference_frame=ref, meta=meta, correction=corr, jacobian=jac)


def correspondence_from_vertices(surface: FingertipSurface, tess: Tessellation, vertex_pixels,
                                 correction: LensCorrection | None = None):
    """Per-quad homographies, rectified sizes and the reference cloud.

    Each cloud point records the image pixel it samples: the inverse
    homography of its rectified grid position, plus ``correction`` when given.
    """
    homs, res = [], []
    parts = {k: [] for k in ("points", "normals", "uv", "quad_id", "pixels")}
    for quad in tess:
        corners = vertex_pixels[list(tess.quad_vertex_indices(quad.id))]
        H, (rows, cols) = patch_homography(corners)
        homs.append(H)
        res.append((rows, cols))
        grid = project_grid(surface, quad, rows, cols)
        cc, rr = np.meshgrid(np.arange(cols, dtype=float), np.arange(rows, dtype=float))
        src = apply_homography(np.linalg.inv(H), np.stack([cc, rr], axis=-1))
        parts["points"].append(grid.points.reshape(-1, 3))
        parts["normals"].append(grid.normals.reshape(-1, 3))
        parts["uv"].append(grid.uv.reshape(-1, 2))
        parts["quad_id"].append(np.full(rows * cols, quad.id, dtype=np.int32))
        parts["pixels"].append(src.reshape(-1, 2))
    cloud = {k: np.concatenate(v) for k, v in parts.items()}
    if correction is not None:
        cloud["pixels"] = cloud["pixels"] + correction(cloud["uv"])
    cloud = ReferenceCloud(**cloud)
    return np.array(homs), np.array(res, dtype=np.int64), cloud


# -- serialisation -----------------------------------------------------------

def _arrays(bundle: CalibrationBundle) -> dict:
    t = bundle.tables
    offsets = np.cumsum([0] + [len(x) for x in t]).astype(np.int64)
    return {
        "camera_pose": bundle.camera.pose,
        "surface_pose": bundle.surface.pose,
        "vertex_pixels": bundle.vertex_pixels,
        "homographies": bundle.homographies,
        "rectified_resolution": bundle.rectified_resolution,
        "table_offsets": offsets,
        "table_quads": np.array([x.quad_id for x in t], dtype=np.int64),
        "table_keys": np.concatenate([x.keys for x in t]).astype(np.int64),
        "table_gradients": np.concatenate([x.gradients for x in t]).reshape(-1, 2),
        "table_counts": np.concatenate([x.counts for x in t]).astype(np.int64),
        "cloud_points": bundle.cloud.points,
        "cloud_normals": bundle.cloud.normals,
        "cloud_uv": bundle.cloud.uv,
        "cloud_quad_id": bundle.cloud.quad_id,
        "cloud_pixels": bundle.cloud.pixels,
        "reference_frame": bundle.reference_frame.pixels,
    } | ({} if bundle.correction is None else {
        "correction_uv": bundle.correction.uv,
        "correction_offsets": bundle.correction.offsets,
    }) | ({} if bundle.jacobian is None else {
        "jacobian_cols": bundle.jacobian.cols,
        "jacobian_rows": bundle.jacobian.rows,
        "jacobian_values": bundle.jacobian.values,
    })


def metadata(bundle: CalibrationBundle) -> dict:
    s = bundle.surface
    return {
        "format": "tactilekit-bundle",
        "version": FORMAT_VERSION,
        "surface": {"cylinder_radius": s.cylinder_radius, "cylinder_length": s.cylinder_length,
                    "sector_deg": s.sector_deg, "cap_extent_deg": s.cap_extent_deg,
                    "gel_thickness": s.gel_thickness},
        "tessellation": {"n_u": bundle.n_u, "n_v": bundle.n_v},
        "camera": {"focal": bundle.camera.focal,
                   "principal_point": list(bundle.camera.principal_point),
                   "resolution": list(bundle.camera.resolution),
                   "fov_deg": bundle.camera.fov, "model": bundle.camera.model},
        "probe_radius": bundle.probe_radius,
        "quantization_bits": bundle.quantization_bits,
        "threshold": bundle.threshold,
        "reference_cloud_size": len(bundle.cloud),
        "table_sizes": [len(t) for t in bundle.tables],
        "table_units": bundle.table_units,
        "lens_correction": None if bundle.correction is None else {
            "points": len(bundle.correction.uv), "smoothing": bundle.correction.smoothing},
        "meta": bundle.meta,
    }


def save_bundle(bundle: CalibrationBundle, path) -> Path:
    """Write the binary bundle and its ``.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    arrays = _arrays(bundle)
    specs, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        data = arr.astype(dt, copy=False).tobytes()
        specs.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        pad = (-len(data)) % 8
        blobs.append(data + b"\0" * pad)
        offset += len(data) + pad
    header = json.dumps({"meta": metadata(bundle), "arrays": specs}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(metadata(bundle), indent=2, sort_keys=True) + "\n")
    return sidecar


def load_bundle(path) -> CalibrationBundle:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise BundleFormatError(f"{path}: not a tactilekit bundle")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise BundleFormatError(f"{path}: unsupported bundle version {version}")
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    arr = {}
    for spec in header["arrays"]:
        start = base + spec["offset"]
        a = np.frombuffer(raw[start:start + spec["nbytes"]], dtype=np.dtype(spec["dtype"]))
        arr[spec["name"]] = a.reshape(spec["shape"]).copy()
    m = header["meta"]
    surface = FingertipSurface(pose=arr["surface_pose"], **m["surface"])
    cam = m["camera"]
    camera = CameraModel(cam["focal"], tuple(cam["principal_point"]), tuple(cam["resolution"]),
                         arr["camera_pose"], cam.get("model", "pinhole"))
    bits = m["quantization_bits"]
    offs = arr["table_offsets"]
    tables = tuple(
        LookupTable(int(q), arr["table_keys"][offs[i]:offs[i + 1]],
                    arr["table_gradients"][offs[i]:offs[i + 1]],
                    arr["table_counts"][offs[i]:offs[i + 1]], bits)
        for i, q in enumerate(arr["table_quads"]))
    corr = None
    if "correction_uv" in arr:
        corr = LensCorrection(arr["correction_uv"], arr["correction_offsets"],
                              (m.get("lens_correction") or {}).get("smoothing", 1e-3))
    jac = None
    if "jacobian_values" in arr:
        jac = SlopeJacobian(arr["jacobian_cols"], arr["jacobian_rows"], arr["jacobian_values"])
    cloud = ReferenceCloud(arr["cloud_points"], arr["cloud_normals"], arr["cloud_uv"],
                           arr["cloud_quad_id"], arr["cloud_pixels"])
    return CalibrationBundle(
        surface=surface, n_u=m["tessellation"]["n_u"], n_v=m["tessellation"]["n_v"],
        camera=camera, vertex_pixels=arr["vertex_pixels"], homographies=arr["homographies"],
        rectified_resolution=arr["rectified_resolution"], tables=tables, cloud=cloud,
        reference_frame=SensorFrame(arr["reference_frame"], 0, 0),
        probe_radius=m["probe_radius"], quantization_bits=bits, threshold=m["threshold"],
        meta=m["meta"], correction=corr, jacobian=jac)

"""Synthetic sensor: a wide-angle camera inside the finger looking at the gel.

The coated membrane is shaded by three directional lights expressed in the
local surface frame (t_u, t_v, n_in): red from +u, green from -u, blue from
+v.  Shading is a Lambertian / Phong blend, quantised to 8 bits last.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import FingertipSurface, InvalidParameterError

R, G, B = 0, 1, 2


class ProjectionError(ValueError):
    pass


# sensor -> camera rotation: image columns follow +z (along the finger),
# image rows follow -y, the optical axis is +x
_SENSOR_TO_CAMERA = np.array([[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class CameraModel:
    focal: float
    principal_point: tuple
    resolution: tuple  # (width, height)
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))  # sensor -> camera
    model: str = "pinhole"  # or "equidistant" (fisheye, r = f * theta)

    def __post_init__(self):
        if self.model not in ("pinhole", "equidistant"):
            raise InvalidParameterError(f"unknown camera model {self.model!r}")

    @property
    def width(self) -> int:
        return int(self.resolution[0])

    @property
    def height(self) -> int:
        return int(self.resolution[1])

    @property
    def fov(self) -> float:
        """Horizontal field of view in degrees."""
        if self.model == "equidistant":
            return math.degrees(self.width / self.focal)
        return math.degrees(2 * math.atan(self.width / (2 * self.focal)))

    @classmethod
    def from_fov(cls, fov_deg, resolution=(640, 480), pose=None, model="pinhole"):
        w, h = resolution
        half = math.radians(fov_deg) / 2
        f = w / (2 * half) if model == "equidistant" else w / (2 * math.tan(half))
        return cls(f, ((w - 1) / 2, (h - 1) / 2), (w, h), np.eye(4) if pose is None else pose, model)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in the sensor frame."""
        Rm, t = self.pose[:3, :3], self.pose[:3, 3]
        return -Rm.T @ t

    def scaled(self, factor: float) -> "CameraModel":
        w, h = self.resolution
        cx, cy = self.principal_point
        return CameraModel(self.focal * factor,
                           ((cx + 0.5) * factor - 0.5, (cy + 0.5) * factor - 0.5),
                           (int(round(w * factor)), int(round(h * factor))), self.pose, self.model)

    def to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.pose[:3, :3].T + self.pose[:3, 3]

    def pixel_rays(self):
        """Unit ray directions in the sensor frame, shape (H, W, 3)."""
        cols, rows = np.meshgrid(np.arange(self.width, dtype=float),
                                 np.arange(self.height, dtype=float))
        return self.rays(cols, rows)

    def rays(self, cols, rows):
        """Unit sensor-frame rays through fractional pixel positions."""
        cols = np.asarray(cols, dtype=float)
        rows = np.asarray(rows, dtype=float)
        cx, cy = self.principal_point
        x, y = (cols - cx) / self.focal, (rows - cy) / self.focal
        if self.model == "equidistant":
            theta = np.hypot(x, y)
            k = np.where(theta > 1e-12, np.sin(theta) / np.maximum(theta, 1e-12), 1.0)
            d_cam = np.stack([x * k, y * k, np.cos(theta)], axis=-1)
        else:
            d_cam = np.stack([x, y, np.ones_like(cols)], axis=-1)
        d = d_cam @ self.pose[:3, :3]  # R^T applied row-wise
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def project_to_image(camera: CameraModel, points) -> np.ndarray:
    """Perspective projection of sensor-frame points to (col, row) pixels."""
    pc = camera.to_camera(points)
    cx, cy = camera.principal_point
    if camera.model == "equidistant":
        rho = np.hypot(pc[..., 0], pc[..., 1])
        theta = np.arctan2(rho, pc[..., 2])
        if np.any(theta >= math.pi / 2):
            raise ProjectionError("point outside the lens hemisphere")
        k = camera.focal * np.where(rho > 1e-12, theta / np.maximum(rho, 1e-12), 1.0 / np.maximum(pc[..., 2], 1e-12))
        return np.stack([k * pc[..., 0] + cx, k * pc[..., 1] + cy], axis=-1)
    if np.any(pc[..., 2] <= 0):
        raise ProjectionError("point behind the camera")
    return np.stack([camera.focal * pc[..., 0] / pc[..., 2] + cx,
                     camera.focal * pc[..., 1] / pc[..., 2] + cy], axis=-1)


def default_camera(surface: FingertipSurface, resolution=(640, 480), margin: float = 0.1,
                   model: str = "equidistant") -> CameraModel:
    """Camera behind the finger axis, sized so the sensed region fills the frame.

    ``margin`` is the fraction of each half-extent kept free around the
    sensed region so probe contacts at the border stay in view.
    """
    top = surface.point(1.0, 0.5)[2]
    z_mid = 0.5 * top
    centre = np.array([-0.9 * surface.cylinder_radius, 0.0, z_mid])
    pose = np.eye(4)
    pose[:3, :3] = _SENSOR_TO_CAMERA
    pose[:3, 3] = -_SENSOR_TO_CAMERA @ centre
    s = np.linspace(0, 1, 201)
    border = np.concatenate([
        np.stack([s, np.zeros_like(s)], -1), np.stack([s, np.ones_like(s)], -1),
        np.stack([np.zeros_like(s), s], -1), np.stack([np.ones_like(s), s], -1)])
    pc = (surface.point(border[:, 0], border[:, 1]) - centre) @ _SENSOR_TO_CAMERA.T
    if model == "equidistant":
        theta = np.arctan2(np.hypot(pc[:, 0], pc[:, 1]), pc[:, 2])
        rho = np.maximum(np.hypot(pc[:, 0], pc[:, 1]), 1e-12)
        tx = np.abs(theta * pc[:, 0] / rho).max()
        ty = np.abs(theta * pc[:, 1] / rho).max()
    else:
        tx = np.abs(pc[:, 0] / pc[:, 2]).max()
        ty = np.abs(pc[:, 1] / pc[:, 2]).max()
    w, h = resolution
    f = min(0.5 * w * (1 - margin) / tx, 0.5 * h * (1 - margin) / ty)
    return CameraModel(f, ((w - 1) / 2, (h - 1) / 2), (int(w), int(h)), pose, model)


@dataclass(frozen=True)
class Light:
    direction: tuple  # unit vector in the local (t_u, t_v, n_in) frame
    channel: int
    intensity: float


def _light_dir(azimuth_axis: int, sign: float, elevation_deg: float) -> tuple:
    a = math.radians(elevation_deg)
    d = [0.0, 0.0, math.cos(a)]
    d[azimuth_axis] = sign * math.sin(a)
    return tuple(d)


@dataclass(frozen=True)
class IlluminationModel:
    lights: tuple = (
        Light(_light_dir(0, +1, 55.0), R, 170.0),
        Light(_light_dir(0, -1, 55.0), G, 170.0),
        Light(_light_dir(1, +1, 55.0), B, 170.0),
    )
    ambient: tuple = (25.0, 25.0, 25.0)
    specular_mix: float = 0.3
    shininess: float = 10.0
    # fractional intensity loss across the sensed region (imperfect piping)
    decay: float = 0.25

    def __post_init__(self):
        if not 0 <= self.specular_mix <= 1:
            raise InvalidParameterError("specular_mix must be in [0, 1]")
        n_x = sum(1 for l in self.lights if abs(l.direction[0]) > 1e-9 and abs(l.direction[1]) < 1e-9)
        n_y = sum(1 for l in self.lights if abs(l.direction[1]) > 1e-9 and abs(l.direction[0]) < 1e-9)
        if n_x != 2 or n_y != 1 or len(self.lights) != 3:
            raise InvalidParameterError("need exactly two x-gradient lights and one y-gradient light")
        if any(l.intensity <= 0 for l in self.lights):
            raise InvalidParameterError("light intensities must be positive")

    def scaled(self, factor: float) -> "IlluminationModel":
        lights = tuple(Light(l.direction, l.channel, l.intensity * factor) for l in self.lights)
        return IlluminationModel(lights, self.ambient, self.specular_mix, self.shininess, self.decay)


@dataclass
class SensorFrame:
    pixels: np.ndarray  # (H, W, 3) uint8, RGB
    timestamp: int = 0  # monotonic ns
    sequence: int = 0

    @property
    def resolution(self) -> tuple:
        return (self.pixels.shape[1], self.pixels.shape[0])


@dataclass
class SurfaceState:
    """Deformation seen by the camera, stored sparsely over pixels.

    ``index`` holds flat pixel indices of deformed pixels, ``displacement``
    the inward displacement (mm) at each pixel centre and ``normals`` the
    visible (inward facing) membrane normal in the sensor frame, either one
    per pixel (N, 3) or one per sub-pixel sample (N, S, 3).
    """
    index: np.ndarray
    displacement: np.ndarray
    normals: np.ndarray
    contact: bool = True

    @classmethod
    def empty(cls) -> "SurfaceState":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, 3)), contact=False)

    def dense_displacement(self, shape) -> np.ndarray:
        d = np.zeros(int(np.prod(shape)))
        d[self.index] = self.displacement
        return d.reshape(shape)


@dataclass
class PokeField:
    displacement: np.ndarray
    normals: np.ndarray
    contact: bool
    probe_center: np.ndarray


def probe_center_for(surface: FingertipSurface, target, probe_radius: float, depth: float) -> np.ndarray:
    """Sphere centre for a poke of ``depth`` at ``target`` along its normal."""
    target = np.asarray(target, dtype=float)
    return target + surface.normal_at(target) * (probe_radius - depth)


def membrane_profile(probe_radius: float, depth: float):
    """Radial shape of the gel membrane under a spherical probe.

    The membrane wraps the sphere down to half the indentation depth, at
    the contact radius r_c, then leaves it tangentially on a cubic skirt
    u_c (1 - (r - r_c) / w)^3 that reaches zero with zero slope at r_c + w.
    Returns (r_c, w).  The peak displacement equals ``depth``.
    """
    R, d = float(probe_radius), float(depth)
    if d <= 0:
        return 0.0, 0.0
    d = min(d, R)
    r_c = math.sqrt(max(R * d - 0.25 * d * d, 0.0))
    slope = r_c / (R - 0.5 * d)
    w = 3.0 * 0.5 * d / slope
    return r_c, w


def membrane_displacement(r, probe_radius: float, depth: float):
    """Inward displacement u(r) and its radial derivative du/dr (mm)."""
    r = np.asarray(r, dtype=float)
    R, d = float(probe_radius), float(depth)
    if d <= 0:
        return np.zeros_like(r), np.zeros_like(r)
    d = min(d, R)
    r_c, w = membrane_profile(R, d)
    root = np.sqrt(np.maximum(R * R - r * r, 1e-12))
    u_in = root - (R - d)
    du_in = -r / root
    x = np.clip((r - r_c) / w, 0.0, 1.0)
    u_out = 0.5 * d * (1 - x) ** 3
    du_out = -1.5 * d * (1 - x) ** 2 / w
    inner = r <= r_c
    return np.where(inner, u_in, u_out), np.where(inner, du_in, du_out)


def membrane_extent(probe_radius: float, depth: float) -> float:
    r_c, w = membrane_profile(probe_radius, depth)
    return r_c + w


def simulate_poke(surface: FingertipSurface, target, probe_radius: float, depth: float,
                  points, normals_out=None) -> PokeField:
    """Membrane indentation of a sphere pressed ``depth`` mm into ``target``.

    The probe approaches along the outward normal at ``target``.  Each
    surface point moves inward along its own normal by the membrane
    profile evaluated at its distance from ``target``; the deformed normal
    tilts radially by the profile slope.
    """
    p = np.asarray(points, dtype=float)
    n_out = surface.normal_at(p) if normals_out is None else np.asarray(normals_out, dtype=float)
    target = np.asarray(target, dtype=float)
    c = probe_center_for(surface, target, probe_radius, max(depth, 0.0))
    if depth <= 0:
        return PokeField(np.zeros(p.shape[:-1]), -n_out, False, c)
    n_in = -n_out
    off = p - target
    radial = off - np.sum(off * n_in, axis=-1, keepdims=True) * n_in
    r = np.linalg.norm(off, axis=-1)
    u, du = membrane_displacement(r, probe_radius, depth)
    rn = np.linalg.norm(radial, axis=-1, keepdims=True)
    e_r = np.where(rn > 1e-12, radial / np.maximum(rn, 1e-12), 0.0)
    normals = n_in - du[..., None] * e_r
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return PokeField(u, normals, bool(np.any(u > 0)), c)


class Renderer:
    """Renders sensor frames for a fixed surface, camera and illumination.

    Per-pixel geometry (the undeformed surface point each pixel sees, its
    local frame and view direction) is cast once at construction.  Deformed
    pixels are shaded on a ``supersample`` x ``supersample`` grid of
    sub-pixel rays and averaged, so pixels straddling a contact rim take a
    partial colour as a real sensor pixel would.
    """

    def __init__(self, surface: FingertipSurface, camera: CameraModel,
                 illumination: IlluminationModel | None = None, supersample: int = 3):
        self.supersample = int(supersample)
        self.surface = surface
        self.camera = camera
        self.illumination = illumination or IlluminationModel()
        h, w = camera.height, camera.width
        rays = camera.pixel_rays().reshape(-1, 3)
        origin = camera.center
        t = surface.intersect(np.broadcast_to(origin, rays.shape), rays, forward=True)
        if np.any(~np.isfinite(t)):
            raise InvalidParameterError("camera must sit inside the fingertip")
        self.points = origin + t[:, None] * rays
        self.uv = surface.uv_of(self.points)
        t_u, t_v, n = surface.frame(self.uv[:, 0], self.uv[:, 1])
        # frame() clamps on the cylinder; below the base the normal is lateral
        self.normals_out = surface.normal_at(self.points)
        self.t_u, self.t_v = t_u, t_v
        view = origin - self.points
        self.view = view / np.linalg.norm(view, axis=-1, keepdims=True)
        self.shape = (h, w)
        self._reference = self._shade(np.arange(h * w), -self.normals_out)
        self._reference_u8 = _quantize(self._reference)

    @property
    def reference_float(self) -> np.ndarray:
        return self._reference.reshape(self.shape + (3,))

    def subpixel_points(self, idx):
        """Undeformed surface points and outward normals seen by sub-pixel rays, (N, S, 3)."""
        s = self.supersample
        off = (np.arange(s) + 0.5) / s - 0.5
        oc, orow = np.meshgrid(off, off)
        w = self.shape[1]
        cols = (idx % w)[:, None] + oc.ravel()[None, :]
        rows = (idx // w)[:, None] + orow.ravel()[None, :]
        rays = self.camera.rays(cols, rows).reshape(-1, 3)
        origin = self.camera.center
        t = self.surface.intersect(np.broadcast_to(origin, rays.shape), rays, forward=True)
        p = origin + t[:, None] * rays
        n = self.surface.normal_at(p)
        return p.reshape(len(idx), s * s, 3), n.reshape(len(idx), s * s, 3)

    def _shade(self, idx, normals) -> np.ndarray:
        normals = np.asarray(normals, dtype=float)
        if normals.ndim == 3:
            k = normals.shape[1]
            out = self._shade_flat(np.repeat(idx, k), normals.reshape(-1, 3))
            return out.reshape(len(idx), k, 3).mean(axis=1)
        return self._shade_flat(idx, normals)

    def _shade_flat(self, idx, normals) -> np.ndarray:
        ill = self.illumination
        n_in = -self.normals_out[idx]
        tu, tv = self.t_u[idx], self.t_v[idx]
        nl = np.stack([np.sum(normals * tu, -1), np.sum(normals * tv, -1),
                       np.sum(normals * n_in, -1)], axis=-1)
        vw = self.view[idx]
        vl = np.stack([np.sum(vw * tu, -1), np.sum(vw * tv, -1), np.sum(vw * n_in, -1)], axis=-1)
        u = np.clip(self.uv[idx, 0], 0, 1)
        v = np.clip(self.uv[idx, 1], 0, 1)
        out = np.empty((len(idx), 3))
        out[:] = ill.ambient
        m = ill.specular_mix
        for light in ill.lights:
            l = np.asarray(light.direction)
            ndl = nl @ l
            lam = np.maximum(ndl, 0.0)
            refl = 2 * ndl[:, None] * nl - l
            spec = np.where(ndl > 0, np.maximum(np.sum(refl * vl, -1), 0.0) ** ill.shininess, 0.0)
            if abs(l[0]) > 1e-9:
                falloff = 1 - ill.decay * u
            else:
                falloff = 1 - ill.decay * (1 - v)
            out[:, light.channel] += light.intensity * falloff * ((1 - m) * lam + m * spec)
        return out

    def render_float(self, state: SurfaceState | None = None) -> np.ndarray:
        img = self._reference.copy()
        if state is not None and len(state.index):
            img[state.index] = self._shade(state.index, state.normals)
        return img.reshape(self.shape + (3,))

    def render(self, state: SurfaceState | None = None, sequence: int = 0,
               noise_sigma: float = 0.0, rng: np.random.Generator | None = None,
               timestamp: int | None = None) -> SensorFrame:
        if noise_sigma > 0:
            rng = rng or np.random.default_rng(0)
            img = self.render_float(state)
            img = img + rng.normal(0.0, noise_sigma, img.shape)
            pix = _quantize(img)
        else:
            pix = self._reference_u8.copy()
            if state is not None and len(state.index):
                pix[state.index] = _quantize(self._shade(state.index, state.normals))
            pix = pix.reshape(self.shape + (3,))
        ts = time.monotonic_ns() if timestamp is None else timestamp
        return SensorFrame(pix, ts, sequence)

    def reference_frame(self) -> SensorFrame:
        return SensorFrame(self._reference_u8.reshape(self.shape + (3,)).copy(), 0, 0)

    def _near(self, center, radius: float) -> np.ndarray:
        # one pixel of slack so rim-straddling pixels are supersampled too
        slack = radius + 2.0 * float(np.linalg.norm(self.points[1] - self.points[0])) + 0.2
        return np.flatnonzero(np.sum((self.points - center) ** 2, axis=1) < slack ** 2)

    def poke_state(self, target, probe_radius: float, depth: float) -> SurfaceState:
        """Pixel-space surface state for a spherical poke."""
        if depth <= 0:
            return SurfaceState.empty()
        near = self._near(np.asarray(target, float), membrane_extent(probe_radius, depth))
        if len(near) == 0:
            return SurfaceState.empty()
        centre = simulate_poke(self.surface, target, probe_radius, depth,
                               self.points[near], self.normals_out[near])
        if self.supersample <= 1:
            keep = centre.displacement > 0
            return SurfaceState(near[keep], centre.displacement[keep], centre.normals[keep],
                                bool(keep.any()))
        p, n = self.subpixel_points(near)
        sub = simulate_poke(self.surface, target, probe_radius, depth, p, n)
        keep = np.any(sub.displacement > 0, axis=1)
        return SurfaceState(near[keep], centre.displacement[keep], sub.normals[keep],
                            bool(keep.any()))

    def sdf_state(self, sdf, bound_center, bound_radius: float, iters: int = 16) -> SurfaceState:
        """Surface state for an arbitrary rigid indenter given as an SDF.

        ``sdf(points) -> (distance, gradient)`` works in the sensor frame; an
        optional ``sdf.distance(points)`` skips the gradient while bisecting.
        Each surface sample is pushed inward until it exits the indenter
        (bisection on the SDF along the inward normal).
        """
        near = self._near(np.asarray(bound_center, float), bound_radius)
        if len(near) == 0:
            return SurfaceState.empty()
        d0 = _distance(sdf, self.points[near])
        # pixels whose centre is well outside cannot be touched by a sub-pixel sample
        px = float(np.linalg.norm(self.points[1] - self.points[0]))
        cand = near[d0 < 1.5 * px]
        if len(cand) == 0:
            return SurfaceState.empty()
        if self.supersample > 1:
            p, n = self.subpixel_points(cand)
        else:
            p, n = self.points[cand][:, None, :], self.normals_out[cand][:, None, :]
        k = p.shape[1]
        pf, nf = p.reshape(-1, 3), n.reshape(-1, 3)
        t, normals = _push_out(sdf, pf, -nf, 2.0 * self.surface.gel_thickness, iters)
        t = t.reshape(-1, k)
        keep = np.any(t > 0, axis=1)
        if not keep.any():
            return SurfaceState.empty()
        normals = normals.reshape(-1, k, 3)[keep]
        if k == 1:
            return SurfaceState(cand[keep], t[keep, 0], normals[:, 0], True)
        tc, _ = _push_out(sdf, self.points[cand[keep]], -self.normals_out[cand[keep]],
                          2.0 * self.surface.gel_thickness, iters)
        return SurfaceState(cand[keep], tc, normals, True)


def _distance(sdf, p):
    f = getattr(sdf, "distance", None)
    return f(p) if f is not None else sdf(p)[0]


def _push_out(sdf, p, n_in, max_t: float, iters: int):
    """Smallest inward travel taking each point outside the SDF, and the exit normal.

    Points already outside stay put and keep their undeformed (inward) normal.
    """
    d0 = _distance(sdf, p)
    inside = d0 < 0
    t = np.zeros(len(p))
    normals = n_in.copy()
    if inside.any():
        q, m = p[inside], n_in[inside]
        lo = np.zeros(len(q))
        hi = np.full(len(q), max_t)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            dm = _distance(sdf, q + mid[:, None] * m)
            inner = dm < 0
            lo = np.where(inner, mid, lo)
            hi = np.where(inner, hi, mid)
        ti = 0.5 * (lo + hi)
        _, grad = sdf(q + ti[:, None] * m)
        t[inside] = ti
        normals[inside] = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    return t, normals


def _quantize(img) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_frame(state: SurfaceState | None, camera: CameraModel,
                 illumination: IlluminationModel | None = None,
                 surface: FingertipSurface | None = None) -> SensorFrame:
    """One-shot render; prefer a cached :class:`Renderer` in loops."""
    return Renderer(surface or FingertipSurface(), camera, illumination).render(state)

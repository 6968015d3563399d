"""Rounded fingertip surface: a cylinder capped by a hemisphere.

Sensor frame: the finger axis is +z starting at the base (z = 0), the
hemispherical cap is centred at (0, 0, length).  The sensed sector is a band
of the circumference centred on +x.  Surface parameters (u, v) are both in
[0, 1]: u runs along the axis and then over the cap (arc-length
proportional), v runs around the circumference of the sensed sector.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class FingertipSurface:
    cylinder_radius: float = 10.0
    cylinder_length: float = 15.0
    sector_deg: float = 180.0
    # polar extent of the sensed part of the cap, measured from the equator
    cap_extent_deg: float = 60.0
    gel_thickness: float = 2.5
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if not self.cylinder_radius > 0:
            raise InvalidParameterError("cylinder_radius must be positive")
        if self.cylinder_length < 0:
            raise InvalidParameterError("cylinder_length must be non-negative")
        if not 0 < self.sector_deg <= 360:
            raise InvalidParameterError("sector_deg must be in (0, 360]")
        if not 0 <= self.cap_extent_deg < 90:
            raise InvalidParameterError("cap_extent_deg must be in [0, 90)")
        if not self.gel_thickness > 0:
            raise InvalidParameterError("gel_thickness must be positive")

    # -- scalar properties -------------------------------------------------

    @property
    def radius(self) -> float:
        return self.cylinder_radius

    @property
    def length(self) -> float:
        return self.cylinder_length

    @property
    def cap_center(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.cylinder_length])

    @property
    def apex_height(self) -> float:
        """Axial distance from the base to the cap apex."""
        return self.cylinder_length + self.cylinder_radius

    @property
    def is_hemisphere(self) -> bool:
        return self.cylinder_length == 0

    @property
    def sector_rad(self) -> float:
        return math.radians(self.sector_deg)

    @property
    def cap_extent_rad(self) -> float:
        return math.radians(self.cap_extent_deg)

    @property
    def sensed_arc_length(self) -> float:
        """Arc length of the sensed meridian (u from 0 to 1), in mm."""
        return self.cylinder_length + self.cylinder_radius * self.cap_extent_rad

    @property
    def u_cap_start(self) -> float:
        return self.cylinder_length / self.sensed_arc_length

    # -- parameterisation --------------------------------------------------

    def _angles(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        s = u * self.sensed_arc_length
        phi = (v - 0.5) * self.sector_rad
        psi = np.clip((s - self.cylinder_length) / self.cylinder_radius, 0.0, None)
        return s, phi, psi

    def point(self, u, v) -> np.ndarray:
        """Surface point(s) for parameters (u, v); returns shape (..., 3)."""
        s, phi, psi = self._angles(u, v)
        R, L = self.cylinder_radius, self.cylinder_length
        on_cap = s > L
        rho = np.where(on_cap, R * np.cos(psi), R)
        z = np.where(on_cap, L + R * np.sin(psi), s)
        return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)

    def frame(self, u, v):
        """Unit tangents (along u, along v) and outward normal at (u, v)."""
        s, phi, psi = self._angles(u, v)
        on_cap = s > self.cylinder_length
        psi = np.where(on_cap, psi, 0.0)
        cphi, sphi = np.cos(phi), np.sin(phi)
        cpsi, spsi = np.cos(psi), np.sin(psi)
        t_u = np.stack([-spsi * cphi, -spsi * sphi, cpsi], axis=-1)
        t_v = np.stack([-sphi, cphi, np.zeros_like(phi)], axis=-1)
        n = np.stack([cpsi * cphi, cpsi * sphi, spsi], axis=-1)
        return t_u, t_v, n

    def normal(self, u, v) -> np.ndarray:
        return self.frame(u, v)[2]

    def normal_at(self, points) -> np.ndarray:
        """Outward unit normal at points lying on (or near) the surface."""
        p = np.asarray(points, dtype=float)
        axis_pt = np.zeros_like(p)
        axis_pt[..., 2] = np.minimum(p[..., 2], self.cylinder_length)
        d = p - axis_pt
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def uv_of(self, points) -> np.ndarray:
        """Inverse parameterisation for points on the surface (shape (..., 2)).

        Values outside [0, 1] indicate points outside the sensed sector.
        """
        p = np.asarray(points, dtype=float)
        R, L = self.cylinder_radius, self.cylinder_length
        phi = np.arctan2(p[..., 1], p[..., 0])
        rho = np.hypot(p[..., 0], p[..., 1])
        psi = np.arctan2(p[..., 2] - L, rho)
        s = np.where(p[..., 2] > L, L + R * psi, p[..., 2])
        u = s / self.sensed_arc_length
        v = phi / self.sector_rad + 0.5
        return np.stack([u, v], axis=-1)

    def signed_distance(self, points) -> np.ndarray:
        """Signed distance to the closed finger surface (negative inside)."""
        p = np.asarray(points, dtype=float)
        zc = np.minimum(p[..., 2], self.cylinder_length)
        d = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2 + (p[..., 2] - zc) ** 2)
        return d - self.cylinder_radius

    def surface_residual(self, points) -> np.ndarray:
        """Distance from the axis (lateral) or cap centre (cap) minus radius."""
        return self.signed_distance(points)

    def intersect(self, origins, directions, forward: bool = False) -> np.ndarray:
        """Line parameter t of the surface crossing nearest to t = 0.

        Lines are ``origins + t * directions``.  With ``forward`` only t > 0
        is accepted (ray casting).  Returns NaN where the line misses.
        """
        o = np.asarray(origins, dtype=float)
        d = np.asarray(directions, dtype=float)
        R, L = self.cylinder_radius, self.cylinder_length
        o, d = np.broadcast_arrays(o, d)
        best = np.full(o.shape[:-1], np.nan)
        eps = 1e-9 * max(R, 1.0)

        def consider(t, valid):
            nonlocal best
            valid = valid & np.isfinite(t)
            if forward:
                valid &= t > 0
            better = valid & (np.isnan(best) | (np.abs(t) < np.abs(best)))
            best = np.where(better, t, best)

        # infinite cylinder, lateral part only (z <= L)
        a = d[..., 0] ** 2 + d[..., 1] ** 2
        b = o[..., 0] * d[..., 0] + o[..., 1] * d[..., 1]
        c = o[..., 0] ** 2 + o[..., 1] ** 2 - R * R
        disc = b * b - a * c
        with np.errstate(invalid="ignore", divide="ignore"):
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            for t in ((-b - sq) / a, (-b + sq) / a):
                z = o[..., 2] + t * d[..., 2]
                consider(t, (a > 1e-15) & (z <= L + eps))
        # cap sphere, z >= L
        w = o - self.cap_center
        a = np.sum(d * d, axis=-1)
        b = np.sum(w * d, axis=-1)
        c = np.sum(w * w, axis=-1) - R * R
        disc = b * b - a * c
        with np.errstate(invalid="ignore", divide="ignore"):
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            for t in ((-b - sq) / a, (-b + sq) / a):
                z = o[..., 2] + t * d[..., 2]
                consider(t, z >= L - eps)
        return best

    def project_along(self, points, directions) -> np.ndarray:
        """Project points onto the surface along the given directions."""
        p = np.asarray(points, dtype=float)
        d = np.asarray(directions, dtype=float)
        t = self.intersect(p, d)
        return p + t[..., None] * d


def build_fingertip_surface(cylinder_radius: float, cylinder_length: float, **kwargs) -> FingertipSurface:
    if not cylinder_radius > 0:
        raise InvalidParameterError(f"cylinder_radius must be positive, got {cylinder_radius}")
    return FingertipSurface(cylinder_radius=float(cylinder_radius),
                            cylinder_length=float(cylinder_length), **kwargs)


@dataclass(frozen=True)
class QuadPatch:
    id: int
    corners_3d: np.ndarray  # (4, 3): (u0,v0) (u1,v0) (u1,v1) (u0,v1)
    corners_uv: np.ndarray  # (4, 2)

    @property
    def uv_min(self) -> np.ndarray:
        return self.corners_uv.min(axis=0)

    @property
    def uv_max(self) -> np.ndarray:
        return self.corners_uv.max(axis=0)

    def coplanarity_error(self) -> float:
        """Distance of the 4th corner from the plane through the first three."""
        c = self.corners_3d
        n = np.cross(c[1] - c[0], c[3] - c[0])
        n /= np.linalg.norm(n)
        return abs(float(np.dot(c[2] - c[0], n)))

    def edge_length(self) -> float:
        c = self.corners_3d
        return float(np.mean(np.linalg.norm(c - np.roll(c, -1, axis=0), axis=1)))

    def contains(self, u, v) -> np.ndarray:
        lo, hi = self.uv_min, self.uv_max
        return (u >= lo[0]) & (u <= hi[0]) & (v >= lo[1]) & (v <= hi[1])


@dataclass(frozen=True)
class Tessellation:
    surface: FingertipSurface
    n_u: int
    n_v: int
    quads: tuple

    def __len__(self):
        return len(self.quads)

    def __iter__(self):
        return iter(self.quads)

    def __getitem__(self, i):
        return self.quads[i]

    @property
    def vertex_uv(self) -> np.ndarray:
        """All grid vertices, shape ((n_u+1)*(n_v+1), 2), row-major in u."""
        uu, vv = np.meshgrid(np.linspace(0, 1, self.n_u + 1),
                             np.linspace(0, 1, self.n_v + 1), indexing="ij")
        return np.stack([uu.ravel(), vv.ravel()], axis=-1)

    def vertex_index(self, iu: int, iv: int) -> int:
        return iu * (self.n_v + 1) + iv

    def quad_vertex_indices(self, quad_id: int) -> tuple:
        iu, iv = divmod(quad_id, self.n_v)
        return (self.vertex_index(iu, iv), self.vertex_index(iu + 1, iv),
                self.vertex_index(iu + 1, iv + 1), self.vertex_index(iu, iv + 1))

    def quad_at(self, u, v) -> np.ndarray:
        """Quad id containing (u, v); ties on shared edges go to the lower id.

        Returns -1 outside the sensed sector.
        """
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        # ceil(x * n) - 1 puts exact grid lines in the lower cell
        iu = np.clip(np.ceil(u * self.n_u).astype(int) - 1, 0, self.n_u - 1)
        iv = np.clip(np.ceil(v * self.n_v).astype(int) - 1, 0, self.n_v - 1)
        inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
        return np.where(inside, iu * self.n_v + iv, -1)


def tessellate(surface: FingertipSurface, n_u: int, n_v: int) -> Tessellation:
    if n_u < 1 or n_v < 1:
        raise InvalidParameterError(f"subdivision counts must be >= 1, got ({n_u}, {n_v})")
    us = np.linspace(0.0, 1.0, n_u + 1)
    vs = np.linspace(0.0, 1.0, n_v + 1)
    quads = []
    for i in range(n_u):
        for j in range(n_v):
            uv = np.array([[us[i], vs[j]], [us[i + 1], vs[j]],
                           [us[i + 1], vs[j + 1]], [us[i], vs[j + 1]]])
            corners = surface.point(uv[:, 0], uv[:, 1])
            quads.append(QuadPatch(id=i * n_v + j, corners_3d=corners, corners_uv=uv))
    return Tessellation(surface=surface, n_u=n_u, n_v=n_v, quads=tuple(quads))


@dataclass(frozen=True)
class SurfaceGrid:
    quad_id: int
    points: np.ndarray  # (rows, cols, 3)
    uv: np.ndarray  # (rows, cols, 2)
    normals: np.ndarray  # (rows, cols, 3), outward

    @property
    def resolution(self) -> tuple:
        return self.points.shape[:2]


def quad_plane_normal(surface: FingertipSurface, quad: QuadPatch) -> np.ndarray:
    c = quad.corners_3d
    n = np.cross(c[2] - c[0], c[3] - c[1])
    n /= np.linalg.norm(n)
    centre_uv = quad.corners_uv.mean(axis=0)
    if np.dot(n, surface.normal(*centre_uv)) < 0:
        n = -n
    return n


def project_grid(surface: FingertipSurface, quad: QuadPatch, rows: int, cols: int) -> SurfaceGrid:
    """Linearly spaced grid over the quad, projected onto the surface.

    Columns run along u (corner 0 -> 1) and rows along v (corner 0 -> 3).
    Each bilinear point of the planar quad is moved onto the surface along
    the quad-plane normal.
    """
    if rows < 2 or cols < 2:
        raise InvalidParameterError("grid needs at least 2 rows and 2 cols")
    a = np.linspace(0.0, 1.0, cols)[None, :, None]
    b = np.linspace(0.0, 1.0, rows)[:, None, None]
    c = quad.corners_3d
    flat = ((1 - a) * (1 - b) * c[0] + a * (1 - b) * c[1]
            + a * b * c[2] + (1 - a) * b * c[3])
    n = quad_plane_normal(surface, quad)
    pts = surface.project_along(flat, np.broadcast_to(n, flat.shape))
    # snap the corners exactly (projection round-off is ~1e-15 anyway)
    pts[0, 0], pts[0, -1], pts[-1, -1], pts[-1, 0] = c[0], c[1], c[2], c[3]
    uv = surface.uv_of(pts)
    normals = surface.normal_at(pts)
    return SurfaceGrid(quad_id=quad.id, points=pts, uv=uv, normals=normals)


@dataclass(frozen=True)
class DeformedPoints:
    points: np.ndarray
    displacement: np.ndarray
    saturated: bool


def displace_surface(surface: FingertipSurface, points, displacement) -> DeformedPoints:
    """Move surface points inward along their normals by ``displacement`` mm.

    Displacements beyond the gel thickness are clipped and flagged.
    """
    p = np.asarray(points, dtype=float)
    d = np.broadcast_to(np.asarray(displacement, dtype=float), p.shape[:-1])
    if np.any(d < 0):
        raise InvalidParameterError("displacements must be non-negative (indentation)")
    saturated = bool(np.any(d > surface.gel_thickness))
    if saturated:
        warnings.warn("displacement exceeds gel thickness; clipped", RuntimeWarning, stacklevel=2)
        d = np.minimum(d, surface.gel_thickness)
    n = surface.normal_at(p)
    return DeformedPoints(points=p - d[..., None] * n, displacement=np.array(d), saturated=saturated)

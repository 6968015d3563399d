"""Rigid test objects as signed distance functions in their own frame.

Every object is symmetric about its local x-z plane and rolls about its
local y axis.  Distances are in mm; gradients come from central
differences so that each shape only has to supply a distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class UnknownObjectError(KeyError):
    pass


@dataclass
class BumpMap:
    """Spherical dimples cut into a sphere (golf-ball texture)."""
    count: int = 336
    depth: float = 0.25
    mouth_radius: float = 1.75

    @property
    def cutter_radius(self) -> float:
        a, h = self.mouth_radius, self.depth
        return (a * a + h * h) / (2 * h)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + math.sqrt(5.0)) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _capped_cylinder(p, radius, half_length, rounding=0.0):
    """Cylinder about the y axis with optional rounded rims."""
    q = np.stack([np.hypot(p[:, 0], p[:, 2]) - (radius - rounding),
                  np.abs(p[:, 1]) - (half_length - rounding)], axis=1)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside - rounding


def _rounded_box(p, half, rounding):
    q = np.abs(p) - (np.asarray(half) - rounding)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside - rounding


@dataclass
class ObjectModel:
    name: str
    shape: str  # sphere | cylinder | cube | disc
    dimensions: dict
    surface_detail: BumpMap | None = None
    _dimples: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.shape not in ("sphere", "cylinder", "cube", "disc"):
            raise ValueError(f"unknown shape {self.shape!r}")
        for k, v in self.dimensions.items():
            if not v > 0:
                raise ValueError(f"dimension {k} must be positive, got {v}")
        if self.surface_detail is not None:
            if self.shape != "sphere":
                raise ValueError("surface detail is only modelled on spheres")
            dirs = fibonacci_sphere(self.surface_detail.count)
            rc = self.surface_detail.cutter_radius
            centres = dirs * (self.dimensions["radius"] + rc - self.surface_detail.depth)
            self._dimples = (cKDTree(centres), rc)

    # ------------------------------------------------------------ distance
    def distance(self, p) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=float))
        dims = self.dimensions
        if self.shape == "sphere":
            d = np.linalg.norm(p, axis=1) - dims["radius"]
            if self._dimples is not None:
                # a dimple can only raise the distance by up to its depth, so
                # points far from the shell keep the plain sphere value
                tree, rc = self._dimples
                band = (d > -self.surface_detail.depth - 0.05) & (d < 2.0)
                if band.any():
                    dc, _ = tree.query(p[band], distance_upper_bound=rc + 0.5)
                    d[band] = np.maximum(d[band], rc - dc)
            return d
        if self.shape in ("cylinder", "disc"):
            return _capped_cylinder(p, dims["radius"], 0.5 * dims["length"], dims.get("rounding", 0.0))
        half = 0.5 * dims["side"]
        return _rounded_box(p, (half, half, half), dims.get("rounding", 0.0))

    def gradient(self, p, eps: float = 1e-4) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=float))
        g = np.empty_like(p)
        for k in range(3):
            e = np.zeros(3)
            e[k] = eps
            g[:, k] = (self.distance(p + e) - self.distance(p - e)) / (2 * eps)
        n = np.linalg.norm(g, axis=1, keepdims=True)
        return g / np.maximum(n, 1e-12)

    def sdf(self, p):
        return self.distance(p), self.gradient(p)

    # ------------------------------------------------------------ geometry
    @property
    def bound_radius(self) -> float:
        dims = self.dimensions
        if self.shape == "sphere":
            return dims["radius"]
        if self.shape in ("cylinder", "disc"):
            return math.hypot(dims["radius"], 0.5 * dims["length"])
        return 0.5 * math.sqrt(3) * dims["side"]

    @property
    def nominal_radius(self) -> float:
        """Rolling radius in the x-z plane (half width for the cube)."""
        if self.shape == "cube":
            return 0.5 * self.dimensions["side"]
        return self.dimensions["radius"]

    def profile(self, n: int = 1440, iters: int = 40) -> np.ndarray:
        """Boundary of the y = 0 cross-section, (n, 2) as (x, z), by ray bisection."""
        phi = np.linspace(0, 2 * math.pi, n, endpoint=False)
        dirs = np.stack([np.cos(phi), np.zeros(n), np.sin(phi)], axis=1)
        lo = np.zeros(n)
        hi = np.full(n, self.bound_radius * 1.01 + 1.0)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            inside = self.distance(dirs * mid[:, None]) < 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        r = 0.5 * (lo + hi)
        return np.stack([dirs[:, 0] * r, dirs[:, 2] * r], axis=1)


def make_object(name: str) -> ObjectModel:
    try:
        factory = OBJECTS[name]
    except KeyError:
        raise UnknownObjectError(name) from None
    return factory()


OBJECTS = {
    "sphere": lambda: ObjectModel("sphere", "sphere", {"radius": 20.0}),
    "cylinder": lambda: ObjectModel("cylinder", "cylinder", {"radius": 15.0, "length": 60.0, "rounding": 1.0}),
    "cube": lambda: ObjectModel("cube", "cube", {"side": 24.0, "rounding": 4.0}),
    "disc": lambda: ObjectModel("disc", "disc", {"radius": 25.0, "length": 12.0, "rounding": 1.5}),
    "golfball": lambda: ObjectModel("golfball", "sphere", {"radius": 21.3}, BumpMap()),
}

SHAPE_NAMES = tuple(OBJECTS)

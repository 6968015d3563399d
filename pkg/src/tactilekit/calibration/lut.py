"""Per-region tables mapping quantised RGB differences to surface gradients.

Gradients are height slopes on the image plane in mm per pixel, column
direction first and row direction second.  Tables built with a slope
Jacobian instead hold tangent-plane slopes (along t_u, then t_v), which
do not change as the view foreshortens across a region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..imaging import key_to_bins, rgb_key
from ..optics import membrane_displacement, membrane_extent


class TableMissingError(KeyError):
    pass


@dataclass(frozen=True)
class LookupTable:
    quad_id: int
    keys: np.ndarray  # (K,) sorted int64
    gradients: np.ndarray  # (K, 2)
    counts: np.ndarray  # (K,)
    quantization_bits: int = 5

    def __len__(self):
        return len(self.keys)

    def dense(self, k: int = 4) -> np.ndarray:
        """Gradient for every possible key, shape (2**(3*bits), 2).

        Stored keys return their own value; every other key the
        inverse-distance-weighted mean of its k nearest stored keys.
        """
        if len(self.keys) == 0:
            raise TableMissingError(self.quad_id)
        n = 1 << (3 * self.quantization_bits)
        return _idw(self, np.arange(n), k)

    def scaled(self, factor: float) -> "LookupTable":
        return LookupTable(self.quad_id, self.keys, self.gradients * factor, self.counts,
                           self.quantization_bits)


def _idw(table: LookupTable, keys, k: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty(keys.shape + (2,))
    pos = np.searchsorted(table.keys, keys)
    pos = np.minimum(pos, len(table.keys) - 1)
    hit = table.keys[pos] == keys
    out[hit] = table.gradients[pos[hit]]
    miss = ~hit
    if miss.any():
        kk = min(k, len(table.keys))
        tree = cKDTree(key_to_bins(table.keys, table.quantization_bits).astype(float))
        d, j = tree.query(key_to_bins(keys[miss], table.quantization_bits).astype(float), k=kk)
        d = d.reshape(-1, kk)
        j = j.reshape(-1, kk)
        w = 1.0 / d
        w /= w.sum(axis=1, keepdims=True)
        out[miss] = np.einsum("nk,nkc->nc", w, table.gradients[j])
    return out


def lookup_gradient(rgb, quad_id: int, tables, k: int = 4) -> np.ndarray:
    """Gradient for signed RGB difference(s) ``rgb`` in one quad's table."""
    table = tables.get(quad_id) if isinstance(tables, dict) else (
        tables[quad_id] if 0 <= quad_id < len(tables) else None)
    if table is None or len(table) == 0:
        raise TableMissingError(quad_id)
    rgb = np.asarray(rgb)
    keys = rgb_key(rgb, table.quantization_bits)
    return _idw(table, keys, k)


def cap_height(r_px, radius_px: float, probe_radius: float, depth: float):
    """Indentation (mm) at image distance ``r_px`` from a poke whose visible
    footprint has radius ``radius_px``."""
    s = membrane_extent(probe_radius, depth) / radius_px
    return membrane_displacement(np.asarray(r_px, dtype=float) * s, probe_radius, depth)[0]


def cap_gradient(d_col, d_row, radius_px: float, probe_radius: float, depth: float) -> np.ndarray:
    """Analytic slope (mm/px) of a poke seen as a circle in the image.

    The visible footprint of the membrane dent (contact cap plus skirt)
    is mapped onto the detected circle, which fixes an isotropic
    mm-per-pixel scale.
    """
    s = membrane_extent(probe_radius, depth) / radius_px
    d_col = np.asarray(d_col, dtype=float)
    d_row = np.asarray(d_row, dtype=float)
    r_px = np.hypot(d_col, d_row)
    _, du = membrane_displacement(r_px * s, probe_radius, depth)
    k = np.where(r_px > 1e-12, du * s / np.maximum(r_px, 1e-12), 0.0)
    return np.stack([k * d_col, k * d_row], axis=-1)


class TableBuilder:
    """Accumulates (key, gradient) samples per quad and averages collisions."""

    def __init__(self, bits: int = 5):
        self.bits = bits
        self._sum = {}
        self._count = {}

    def add(self, quad_id: int, diff_rgb, gradients):
        keys = rgb_key(diff_rgb, self.bits).ravel()
        g = np.asarray(gradients, dtype=float).reshape(-1, 2)
        uk, inv = np.unique(keys, return_inverse=True)
        sums = np.zeros((len(uk), 2))
        np.add.at(sums, inv, g)
        cnt = np.bincount(inv, minlength=len(uk))
        s = self._sum.setdefault(quad_id, {})
        c = self._count.setdefault(quad_id, {})
        for key, sv, cv in zip(uk.tolist(), sums, cnt.tolist()):
            if key in s:
                s[key] = s[key] + sv
                c[key] += cv
            else:
                s[key] = sv.copy()
                c[key] = cv

    def quads(self):
        return sorted(self._sum)

    def table(self, quad_id: int) -> LookupTable:
        if quad_id not in self._sum:
            raise TableMissingError(quad_id)
        keys = np.array(sorted(self._sum[quad_id]), dtype=np.int64)
        grads = np.array([self._sum[quad_id][k] / self._count[quad_id][k] for k in keys.tolist()])
        counts = np.array([self._count[quad_id][k] for k in keys.tolist()], dtype=np.int64)
        return LookupTable(quad_id, keys, grads.reshape(-1, 2), counts, self.bits)


def cap_gradient_affine(d_col, d_row, jacobian, probe_radius: float, depth: float, slope: bool = False):
    """Analytic slope (mm/px) through a local pixel -> tangent-plane (mm) Jacobian.

    Returns (gradients (N, 2), touched (N,) bool) where ``touched`` marks
    pixels inside the membrane dent.  With ``slope`` the gradients stay in
    the tangent plane (dimensionless, along t_u and t_v).
    """
    J = np.asarray(jacobian, dtype=float)
    off = np.stack([np.asarray(d_col, float), np.asarray(d_row, float)], axis=-1)
    m = off @ J.T
    r = np.linalg.norm(m, axis=-1)
    _, du = membrane_displacement(r, probe_radius, depth)
    e = np.where(r[:, None] > 1e-12, m / np.maximum(r[:, None], 1e-12), 0.0)
    g = du[:, None] * e
    if not slope:
        g = g @ J
    return g, r < membrane_extent(probe_radius, depth)

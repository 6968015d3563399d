"""Height-map integration of gradient fields.

Gradients are sampled at pixel centres (x slope along columns, y slope
along rows, height units per pixel).  The zero-Dirichlet boundary sits half
a pixel outside the image (ghost value h[-1] = -h[0]), where the 5-point
Laplacian is diagonalised by the type-II discrete sine transform, so a
solve costs two 2-D DSTs.
"""

from __future__ import annotations

import numpy as np
from scipy import fft, sparse
from scipy.sparse.linalg import spsolve

from .imaging import InvalidInputError


def _eigenvalues(n: int) -> np.ndarray:
    k = np.arange(1, n + 1)
    return -4.0 * np.sin(np.pi * k / (2 * n)) ** 2


_EIG_CACHE = {}


def laplacian_eigenvalues(shape) -> np.ndarray:
    key = tuple(shape)
    lam = _EIG_CACHE.get(key)
    if lam is None:
        lam = _eigenvalues(shape[0])[:, None] + _eigenvalues(shape[1])[None, :]
        _EIG_CACHE[key] = lam
    return lam


def _face_flux(g, axis: int) -> np.ndarray:
    """Slopes on the n+1 cell faces along ``axis`` from pixel-centre samples.

    Interior faces average their two neighbours; the two boundary faces
    are linearly extrapolated.
    """
    g = np.moveaxis(np.asarray(g, dtype=float), axis, 0)
    n = g.shape[0]
    f = np.empty((n + 1,) + g.shape[1:])
    if n == 1:
        f[0] = f[1] = g[0]
    else:
        f[1:-1] = 0.5 * (g[1:] + g[:-1])
        f[0] = 1.5 * g[0] - 0.5 * g[1]
        f[-1] = 1.5 * g[-1] - 0.5 * g[-2]
    return np.moveaxis(f, 0, axis)


def divergence(gx, gy) -> np.ndarray:
    """Divergence of a pixel-centre gradient field, one value per pixel."""
    fx = _face_flux(gx, 1)
    fy = _face_flux(gy, 0)
    return (fx[:, 1:] - fx[:, :-1]) + (fy[1:, :] - fy[:-1, :])


def solve_poisson_dst(rhs) -> np.ndarray:
    """Solve L h = rhs for the Dirichlet 5-point Laplacian L."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.ndim != 2:
        raise InvalidInputError("right-hand side must be a 2-D array")
    spec = fft.dstn(rhs, type=2, norm="ortho", workers=1)
    spec /= laplacian_eigenvalues(rhs.shape)
    return fft.idstn(spec, type=2, norm="ortho", workers=1)


def dense_laplacian(shape):
    """Sparse matrix of the same operator, for oracle solves."""
    def axis(n):
        main = np.full(n, -2.0)
        main[0] = main[-1] = -3.0
        return sparse.diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1])
    h, w = shape
    return (sparse.kron(sparse.eye(h), axis(w)) + sparse.kron(axis(h), sparse.eye(w))).tocsc()


def solve_poisson_dense(rhs) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=float)
    return spsolve(dense_laplacian(rhs.shape), rhs.ravel()).reshape(rhs.shape)


def integrate_gradients(gx, gy, solver=solve_poisson_dst) -> np.ndarray:
    gx = np.asarray(gx, dtype=float)
    gy = np.asarray(gy, dtype=float)
    if gx.shape != gy.shape or gx.ndim != 2:
        raise InvalidInputError(f"gradient fields must be matching 2-D arrays, got {gx.shape}, {gy.shape}")
    return solver(divergence(gx, gy))

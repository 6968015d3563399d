"""Independent reference computations used by several test modules."""

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve


def disc_frames(shape, center, radius, rng, noise=2.0, contrast=45.0, base=120.0):
    """(frame, reference) uint8 RGB pair differing by a filled disc."""
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    disc = (cc - center[0]) ** 2 + (rr - center[1]) ** 2 <= radius ** 2
    ref = np.full((h, w, 3), base) + rng.normal(0, noise, (h, w, 3))
    cur = np.full((h, w, 3), base) + rng.normal(0, noise, (h, w, 3))
    cur[disc] += contrast
    q = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)
    return q(cur), q(ref)


def brute_force_circle(edges, r_min, r_max, step=0.25):
    """Exhaustive (cx, cy, r) search maximising ring support.

    ``edges`` are (row, col) boundary pixels.  A pixel supports a circle
    when its distance to the centre is within half a pixel of r.  A coarse
    integer pass over the edge bounding box is refined on a ``step`` grid.
    Returns ((cx, cy), r, votes) with r on the region-boundary convention
    (half a pixel outside the edge ring).
    """
    ey, ex = edges[:, 0].astype(float), edges[:, 1].astype(float)
    radii = np.arange(r_min, r_max + 1e-9, 1.0)

    def score(cx, cy, rs):
        d = np.hypot(ex - cx, ey - cy)
        return np.array([(np.abs(d - r) <= 0.5).sum() for r in rs])

    best = (-1, None)
    for cy in np.arange(ey.min(), ey.max() + 1):
        for cx in np.arange(ex.min(), ex.max() + 1):
            d = np.hypot(ex - cx, ey - cy)
            k = np.rint(d).astype(int)
            ok = (k >= r_min) & (k <= r_max)
            if not ok.any():
                continue
            votes = np.bincount(k[ok] - r_min, minlength=len(radii))
            i = int(votes.argmax())
            if votes[i] > best[0]:
                best = (votes[i], (cx, cy, radii[i]))
    cx0, cy0, r0 = best[1]
    fine = np.arange(-1.0, 1.0 + 1e-9, step)
    best = (-1, None)
    for dy in fine:
        for dx in fine:
            rs = r0 + fine
            s = score(cx0 + dx, cy0 + dy, rs)
            i = int(s.argmax())
            if s[i] > best[0]:
                best = (s[i], (cx0 + dx, cy0 + dy, rs[i]))
    cx, cy, r = best[1]
    return (cx, cy), r + 0.5, best[0]


def dense_poisson(rhs):
    """Direct sparse solve of the 5-point Laplacian with the zero boundary
    half a pixel outside the grid (mirror ghost h[-1] = -h[0])."""
    rhs = np.asarray(rhs, dtype=float)
    h, w = rhs.shape

    def lap1d(n):
        main = -2.0 * np.ones(n)
        main[0] = main[-1] = -3.0
        return sparse.diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1])

    A = sparse.kron(sparse.eye(h), lap1d(w)) + sparse.kron(lap1d(h), sparse.eye(w))
    return spsolve(A.tocsc(), rhs.ravel()).reshape(h, w)


def rotation_error_deg(Ra, Rb):
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))

"""Four-point perspective transforms between image quads and rectangles."""

from __future__ import annotations

import numpy as np


class SingularHomographyError(ValueError):
    pass


def four_point_homography(src, dst) -> np.ndarray:
    """3x3 projective map taking the 4 ``src`` points onto the 4 ``dst`` points."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * k], b[2 * k + 1] = u, v
    try:
        h = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularHomographyError("degenerate corner configuration") from exc
    H = np.append(h, 1.0).reshape(3, 3)
    if abs(np.linalg.det(H)) < 1e-12:
        raise SingularHomographyError("homography is not invertible")
    return H


def apply_homography(H, points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    hp = p @ H[:, :2].T + H[:, 2]
    return hp[..., :2] / hp[..., 2:3]


def rectified_size(corners) -> tuple:
    """(rows, cols) of the rectified patch for image corners c0..c3.

    Columns follow c0->c1, rows follow c0->c3; each side keeps as many
    samples as the longer of its two image edges spans.
    """
    c = np.asarray(corners, dtype=float)
    width = max(np.linalg.norm(c[1] - c[0]), np.linalg.norm(c[2] - c[3]))
    height = max(np.linalg.norm(c[3] - c[0]), np.linalg.norm(c[2] - c[1]))
    return max(2, int(round(height)) + 1), max(2, int(round(width)) + 1)


def rectangle_corners(rows: int, cols: int) -> np.ndarray:
    return np.array([[0, 0], [cols - 1, 0], [cols - 1, rows - 1], [0, rows - 1]], dtype=float)


def patch_homography(corners):
    """Homography rectifying image corners (col, row) to their rectangle."""
    rows, cols = rectified_size(corners)
    return four_point_homography(corners, rectangle_corners(rows, cols)), (rows, cols)

"""Contact patch extraction and frame-to-frame tracking with hull-gated ICP."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

log = logging.getLogger(__name__)


class TrackingDegenerateError(RuntimeError):
    pass


@dataclass
class ContactPatch:
    points: np.ndarray  # (M, 3) mm
    displacements: np.ndarray  # (M,) mm
    hull_uv: np.ndarray  # (K, 2) counter-clockwise
    centroid: np.ndarray
    max_displacement: float
    uv: np.ndarray | None = None
    index: np.ndarray | None = None  # rows of the source cloud

    def __len__(self):
        return len(self.points)

    @property
    def centroid_uv(self) -> np.ndarray:
        return self.uv.mean(axis=0)


@dataclass
class RigidMotion:
    rotation: np.ndarray
    translation: np.ndarray
    rms_residual: float
    iterations: int
    history: list = field(default_factory=list)
    confident: bool = True

    @classmethod
    def identity(cls, confident: bool = True) -> "RigidMotion":
        return cls(np.eye(3), np.zeros(3), 0.0, 0, [], confident)

    @property
    def angle(self) -> float:
        """Rotation angle in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


# ---------------------------------------------------------------- hull

def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> np.ndarray:
    """Counter-clockwise hull vertices; collinear points are dropped.

    Degenerate inputs come back as the distinct extreme points (1 or 2 rows).
    """
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts
    try:
        return pts[ConvexHull(pts).vertices]
    except QhullError:
        return monotone_chain(pts)


def monotone_chain(points) -> np.ndarray:
    """Andrew's monotone chain; handles collinear sets that Qhull rejects."""
    pts = [tuple(p) for p in np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)]
    if len(pts) <= 2:
        return np.array(pts).reshape(-1, 2)
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        return np.array([pts[0], pts[-1]])
    return np.array(hull)


def points_in_hull(points, hull, eps: float = 1e-9) -> np.ndarray:
    """Inside-or-on test against a counter-clockwise convex polygon."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    h = np.asarray(hull, dtype=float)
    if len(h) == 0:
        return np.zeros(len(p), dtype=bool)
    if len(h) == 1:
        return np.all(np.abs(p - h[0]) <= eps, axis=1)
    if len(h) == 2:
        a, b = h
        ab = b - a
        t = ((p - a) @ ab) / (ab @ ab)
        off = np.abs(ab[0] * (p[:, 1] - a[1]) - ab[1] * (p[:, 0] - a[0])) / np.linalg.norm(ab)
        return (t >= -eps) & (t <= 1 + eps) & (off <= eps)
    a = h
    b = np.roll(h, -1, axis=0)
    e = b - a
    # cross(edge, p - a) >= 0 for every edge
    c = e[None, :, 0] * (p[:, None, 1] - a[None, :, 1]) - e[None, :, 1] * (p[:, None, 0] - a[None, :, 0])
    scale = np.linalg.norm(e, axis=1)[None, :]
    return np.all(c >= -eps * scale, axis=1)


# ---------------------------------------------------------------- patches

def extract_contact(cloud, fraction: float = 0.5, min_displacement: float = 0.1):
    """Points whose displacement is at least ``fraction`` of the maximum.

    Returns None when the cloud never exceeds ``min_displacement``.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    disp = np.asarray(cloud.displacement, dtype=float)
    if disp.size == 0:
        return None
    peak = float(disp.max())
    if peak < min_displacement:
        return None
    idx = np.flatnonzero(disp >= fraction * peak)
    uv = np.asarray(cloud.uv)[idx]
    pts = np.asarray(cloud.points)[idx]
    return ContactPatch(points=pts, displacements=disp[idx], hull_uv=convex_hull(uv),
                        centroid=pts.mean(axis=0), max_displacement=peak, uv=uv, index=idx)


def hull_gate(previous: ContactPatch, current: ContactPatch, min_points: int = 3) -> np.ndarray:
    """Previous patch points lying inside the current patch hull (in u, v)."""
    if previous is None or current is None or len(previous) == 0 or len(current) == 0:
        raise TrackingDegenerateError("hull gate needs two non-empty patches")
    keep = points_in_hull(previous.uv, current.hull_uv)
    if keep.sum() < min_points:
        raise TrackingDegenerateError(f"only {int(keep.sum())} points survive the hull gate")
    return previous.points[keep]


# ---------------------------------------------------------------- ICP

def best_fit_transform(src, dst):
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (Kabsch)."""
    ca = src.mean(axis=0)
    cb = dst.mean(axis=0)
    H = (src - ca).T @ (dst - cb)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, cb - R @ ca


def _check_spread(points, name):
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) < 3:
        raise TrackingDegenerateError(f"{name}: need at least 3 points")
    s = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if s[0] < 1e-9 or s[1] < 1e-6 * max(s[0], 1.0):
        raise TrackingDegenerateError(f"{name}: points are collinear")
    return p


def _icp_refine(src, dst, tree, R, t, max_iter, tol, max_distance):
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        moved = src @ R.T + t
        d, j = tree.query(moved)
        use = np.ones(len(d), dtype=bool) if max_distance is None else d <= max_distance
        if use.sum() < 3:
            use[:] = True
        rms_before = float(np.sqrt(np.mean(d[use] ** 2)))
        R_new, t_new = best_fit_transform(src[use], dst[j[use]])
        rms_fit = float(np.sqrt(np.mean(np.sum((src[use] @ R_new.T + t_new - dst[j[use]]) ** 2, axis=1))))
        if rms_fit <= rms_before:
            R, t = R_new, t_new
        if not history:
            history.append(rms_before)
        history.append(min(rms_fit, rms_before))
        if abs(history[-2] - history[-1]) < tol:
            break
    return R, t, history, it


def _normal(points):
    c = points - points.mean(axis=0)
    return np.linalg.svd(c, full_matrices=False)[2][2]


def _align(a, b):
    """Smallest rotation taking unit vector ``a`` onto ``b``."""
    v = np.cross(a, b)
    c = float(a @ b)
    if np.linalg.norm(v) < 1e-12:
        return np.eye(3)
    K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + K + K @ K / (1.0 + c)


def _spin(axis, angle):
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def icp_register(source, target, max_iter: int = 50, tol: float = 1e-4, init=None,
                 max_distance: float | None = None, spin_range: float = 15.0,
                 spin_step: float = 1.0, keep: int = 3) -> RigidMotion:
    """Point-to-point ICP of ``source`` onto ``target``.

    Each iteration refits the full transform from the original source to
    its current nearest neighbours, so the RMS over matched pairs cannot
    increase.  Stops when the RMS changes by less than ``tol``.

    Without ``init`` the patches are pre-aligned by centroid and mean
    normal.  Smooth contact patches are close to rotationally symmetric
    about that normal, so a few spin hypotheses (degrees) are screened and
    the best ``keep`` are refined; the lowest final residual wins.
    """
    src = _check_spread(source, "source")
    dst = _check_spread(target, "target")
    tree = cKDTree(dst)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    starts = []
    if init is not None:
        starts.append((np.asarray(init[:3, :3], dtype=float), np.asarray(init[:3, 3], dtype=float)))
    else:
        starts.append((np.eye(3), np.zeros(3)))
        ns, nd = _normal(src), _normal(dst)
        if ns @ nd < 0:
            nd = -nd
        R0 = _align(ns, nd)
        angles = np.deg2rad(np.arange(-spin_range, spin_range + 1e-9, spin_step)) if spin_step > 0 else [0.0]
        cand = []
        for a in angles:
            R = _spin(nd, a) @ R0
            t = cd - R @ cs
            d = tree.query(src @ R.T + t)[0]
            cand.append((float(np.mean(d ** 2)), R, t))
        cand.sort(key=lambda c: c[0])
        starts += [(R, t) for _, R, t in cand[:keep]]

    best = None
    for R, t in starts:
        out = _icp_refine(src, dst, tree, R, t, max_iter, tol, max_distance)
        if best is None or out[2][-1] < best[2][-1]:
            best = out
        if best[2][-1] < 1e-9:
            break
    R, t, history, it = best
    return RigidMotion(R, t, history[-1], it, history)


# ---------------------------------------------------------------- tracker

@dataclass
class TrackRecord:
    timestamp: float
    centroid: np.ndarray
    motion: RigidMotion
    residual: float
    confidence: bool


class ContactTracker:
    """Keeps the previous patch and reports the rigid motion between frames."""

    def __init__(self, fraction: float = 0.5, min_displacement: float = 0.1,
                 max_iter: int = 50, tol: float = 1e-4, max_points: int = 400, seed: int = 0,
                 spin_step: float = 0.0):
        self.fraction = fraction
        self.min_displacement = min_displacement
        self.max_iter = max_iter
        self.tol = tol
        self.max_points = max_points
        self.spin_step = spin_step  # frame-to-frame spins are small; no spin search by default
        self.rng = np.random.default_rng(seed)
        self.patch = None
        self.log: list[TrackRecord] = []

    def reset(self):
        self.patch = None
        self.log.clear()

    def _thin(self, pts):
        if len(pts) <= self.max_points:
            return pts
        return pts[self.rng.choice(len(pts), self.max_points, replace=False)]

    def track_step(self, cloud, timestamp: float | None = None):
        """Returns (patch, motion); patch is None once contact is lost."""
        ts = float(getattr(cloud, "timestamp", 0) if timestamp is None else timestamp)
        patch = extract_contact(cloud, self.fraction, self.min_displacement)
        prev, self.patch = self.patch, patch
        if patch is None or prev is None:
            motion = RigidMotion.identity(confident=False)
        else:
            try:
                gated = hull_gate(prev, patch)
                # start from the centroid shift: on a rolling sphere the fit is flat along
                # the rolling directions and would otherwise settle near identity
                init = np.eye(4)
                init[:3, 3] = patch.centroid - prev.centroid
                motion = icp_register(self._thin(gated), patch.points, self.max_iter, self.tol,
                                      init=None if self.spin_step > 0 else init,
                                      spin_step=self.spin_step, keep=1)
            except TrackingDegenerateError as exc:
                log.debug("tracking degenerate: %s", exc)
                motion = RigidMotion.identity(confident=False)
        centroid = patch.centroid if patch is not None else np.full(3, np.nan)
        self.log.append(TrackRecord(ts, centroid, motion, motion.rms_residual, motion.confident))
        return patch, motion

    def write_csv(self, path):
        write_track_log(self.log, path)


TRACK_COLUMNS = ["timestamp", "cx", "cy", "cz", "rx", "ry", "rz", "tx", "ty", "tz",
                 "residual", "confidence"]


def write_track_log(records, path):
    """One row per step; the motion is stored as a rotation vector (rad) plus translation."""
    from scipy.spatial.transform import Rotation

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_COLUMNS)
        for r in records:
            rv = Rotation.from_matrix(r.motion.rotation).as_rotvec()
            w.writerow([f"{r.timestamp:.6f}", *(f"{c:.5f}" for c in r.centroid),
                        *(f"{c:.7f}" for c in rv), *(f"{c:.5f}" for c in r.motion.translation),
                        f"{r.residual:.6f}", int(bool(r.confidence))])

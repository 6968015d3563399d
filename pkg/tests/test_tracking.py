import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles import rotation_error_deg
from tactilekit.geometry import FingertipSurface
from tactilekit.optics import membrane_profile, simulate_poke
from tactilekit.reconstruction import ReconstructedCloud
from tactilekit.tracking import (TRACK_COLUMNS, ContactPatch, ContactTracker, RigidMotion,
                                 TrackingDegenerateError, convex_hull, extract_contact, hull_gate,
                                 icp_register, monotone_chain, points_in_hull, write_track_log)

SURF = FingertipSurface()
UU, VV = np.meshgrid(np.linspace(0, 1, 400), np.linspace(0, 1, 250))
GRID_UV = np.stack([UU.ravel(), VV.ravel()], axis=1)
GRID = SURF.point(GRID_UV[:, 0], GRID_UV[:, 1]).reshape(-1, 3)


def poke_cloud(uv, depth, probe=2.0):
    target = SURF.point(*uv)
    f = simulate_poke(SURF, target, probe, depth, GRID)
    pts = GRID - f.displacement[:, None] * SURF.normal_at(GRID)
    return ReconstructedCloud(pts, f.displacement, np.zeros(len(GRID), int), GRID_UV), target


def poke_patch_points(uv, depth):
    cloud, _ = poke_cloud(uv, depth)
    return extract_contact(cloud).points


def disc_patch(center, radius, spacing=0.01):
    g = np.arange(-radius, radius + 1e-12, spacing)
    x, y = np.meshgrid(g, g)
    keep = x ** 2 + y ** 2 <= radius ** 2
    uv = np.stack([x[keep], y[keep]], axis=1) + center
    pts = np.column_stack([uv, np.zeros(len(uv))])
    return ContactPatch(pts, np.ones(len(uv)), convex_hull(uv), pts.mean(axis=0), 1.0, uv=uv)


def rigid(points, R, t, about=None):
    c = points.mean(axis=0) if about is None else about
    return (points - c) @ R.T + c + t, c + t - R @ c


# ---------------------------------------------------------------- extract_contact

def test_extract_fraction_one_is_argmax():
    cloud, _ = poke_cloud((0.5, 0.5), 0.8)
    cloud.displacement[[10, 20]] = cloud.displacement.max()
    p = extract_contact(cloud, fraction=1.0)
    assert set(p.index) == set(np.flatnonzero(cloud.displacement == cloud.displacement.max()))


@pytest.mark.parametrize("depth", [0.4, 0.8, 1.2])
def test_extract_half_height_radius(depth):
    cloud, target = poke_cloud((0.45, 0.5), depth)
    p = extract_contact(cloud, 0.5)
    r_c, _ = membrane_profile(2.0, depth)
    radius = np.linalg.norm(GRID[p.index] - target, axis=1).max()
    assert radius == pytest.approx(r_c, rel=0.20)
    assert np.all(p.displacements >= 0.5 * p.max_displacement)
    assert len(p.hull_uv) >= 3


def test_extract_none_below_threshold():
    cloud, _ = poke_cloud((0.5, 0.5), 0.05)
    assert extract_contact(cloud, min_displacement=0.1) is None
    flat = ReconstructedCloud(GRID, np.zeros(len(GRID)), np.zeros(len(GRID), int), GRID_UV)
    assert extract_contact(flat) is None
    with pytest.raises(ValueError):
        extract_contact(cloud, fraction=0)


@settings(max_examples=1000)
@given(seed=st.integers(0, 2 ** 31 - 1), k=st.floats(1e-2, 1e2), fraction=st.floats(0.05, 1.0))
def test_extract_scale_consistency(seed, k, fraction):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 200))
    disp = rng.uniform(0, 2, n)
    uv = rng.uniform(0, 1, (n, 2))
    pts = np.column_stack([uv, rng.normal(size=n)])
    a = extract_contact(ReconstructedCloud(pts, disp, np.zeros(n, int), uv), fraction, 0.0)
    b = extract_contact(ReconstructedCloud(pts, disp * k, np.zeros(n, int), uv), fraction, 0.0)
    # exact ties with the threshold may round either way
    ties = np.flatnonzero(np.abs(disp - fraction * disp.max()) <= 1e-12 * disp.max())
    assert set(a.index) ^ set(b.index) <= set(ties)


# ---------------------------------------------------------------- hull

def test_hull_backends_agree(rng):
    pts = rng.normal(size=(200, 2))
    a, b = convex_hull(pts), monotone_chain(pts)
    assert {tuple(p) for p in a} == {tuple(p) for p in b}
    line = np.column_stack([np.arange(5.0), np.arange(5.0)])
    assert len(convex_hull(line)) == 2


def test_boundary_counts_inside():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    edge = np.array([[0.5, 0.0], [1.0, 0.5], [0, 0], [1, 1], [0.5, 1.0]])
    assert points_in_hull(edge, convex_hull(sq)).all()
    assert not points_in_hull([[1.0001, 0.5], [-0.01, 0.5]], convex_hull(sq)).any()


def test_gate_too_few_points():
    a = disc_patch(np.zeros(2), 0.1)
    b = disc_patch(np.array([5.0, 5.0]), 0.1)
    with pytest.raises(TrackingDegenerateError):
        hull_gate(a, b)
    tiny = ContactPatch(np.zeros((2, 3)), np.ones(2), np.zeros((2, 2)), np.zeros(3), 1.0, uv=np.zeros((2, 2)))
    with pytest.raises(TrackingDegenerateError):
        hull_gate(tiny, a)
    with pytest.raises(TrackingDegenerateError):
        hull_gate(None, a)


def test_gate_idempotent():
    a = disc_patch(np.zeros(2), 0.1)
    b = disc_patch(np.array([0.06, 0.0]), 0.1)
    once = hull_gate(a, b)
    inner = ContactPatch(once, np.ones(len(once)), convex_hull(once[:, :2]), once.mean(0), 1.0, uv=once[:, :2])
    twice = hull_gate(inner, b)
    assert np.array_equal(once, twice)
    assert np.array_equal(hull_gate(a, a), a.points)


def test_gate_half_overlap():
    rho = 0.1
    # lens area is half the disc at separation d: solve 2 acos(x) - 2 x sqrt(1 - x^2) = pi/2, x = d / 2 rho
    from scipy.optimize import brentq

    x = brentq(lambda x: 2 * np.arccos(x) - 2 * x * np.sqrt(1 - x * x) - np.pi / 2, 0, 1)
    a = disc_patch(np.zeros(2), rho, 0.002)
    b = disc_patch(np.array([2 * x * rho, 0.0]), rho, 0.002)
    frac = len(hull_gate(a, b)) / len(a)
    assert frac == pytest.approx(0.5, abs=0.10 * 0.5)


# ---------------------------------------------------------------- ICP

def test_icp_identity():
    pts = poke_patch_points((0.5, 0.5), 0.8)
    m = icp_register(pts, pts)
    assert np.allclose(m.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(m.translation, 0, atol=1e-9)
    assert m.rms_residual < 1e-9


def test_icp_recovers_known_motion():
    src = poke_patch_points((0.45, 0.55), 1.0)
    R = Rotation.from_rotvec(np.deg2rad(5.0) * np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])).as_matrix()
    t = 0.5 * np.array([0.6, 0.0, 0.8])
    dst, t_true = rigid(src, R, t)
    m = icp_register(src, dst, max_iter=500, tol=1e-10)
    assert rotation_error_deg(m.rotation, R) < 0.1
    assert np.linalg.norm(m.translation - t_true) < 0.01
    assert np.all(np.diff(m.history) <= 1e-12)


def test_icp_noise_floor(rng):
    sigma = 0.02
    src = poke_patch_points((0.5, 0.45), 1.0)
    R = Rotation.from_euler("xyz", [1.0, -2.0, 2.5], degrees=True).as_matrix()
    dst, t_true = rigid(src, R, np.array([0.2, 0.1, -0.1]))
    dst = dst + rng.normal(0, sigma, dst.shape)
    m = icp_register(src, dst, max_iter=200, tol=1e-9)
    assert 0.5 * sigma < m.rms_residual < 2 * np.sqrt(3) * sigma
    assert rotation_error_deg(m.rotation, R) < 0.5


def test_icp_rejects_collinear():
    line = np.outer(np.linspace(0, 1, 20), [1.0, 2.0, 3.0])
    good = np.random.default_rng(0).normal(size=(20, 3))
    with pytest.raises(TrackingDegenerateError):
        icp_register(line, good)
    with pytest.raises(TrackingDegenerateError):
        icp_register(good, line)
    with pytest.raises(TrackingDegenerateError):
        icp_register(good[:2], good)


@settings(max_examples=1000)
@given(seed=st.integers(0, 2 ** 31 - 1), deg=st.floats(0, 10), shift=st.floats(0, 1))
def test_icp_rotation_orthonormal(seed, deg, shift):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(int(rng.integers(6, 40)), 3)) * [2.0, 2.0, 0.3]
    ax = rng.normal(size=3)
    R = Rotation.from_rotvec(np.deg2rad(deg) * ax / np.linalg.norm(ax)).as_matrix()
    dst = src @ R.T + shift * rng.normal(size=3) + rng.normal(0, 0.01, src.shape)
    m = icp_register(src, dst, max_iter=20, spin_step=0)
    assert np.allclose(m.rotation.T @ m.rotation, np.eye(3), atol=1e-10)
    assert np.linalg.det(m.rotation) == pytest.approx(1.0, abs=1e-10)
    assert np.all(np.diff(m.history) <= 1e-12)


def test_rigid_motion_helpers():
    m = RigidMotion(Rotation.from_euler("z", 30, degrees=True).as_matrix(), np.array([1.0, 2, 3]), 0.0, 1)
    assert m.angle == pytest.approx(np.deg2rad(30))
    assert np.allclose(m.apply(np.zeros((1, 3))), [[1, 2, 3]])
    assert m.matrix()[3, 3] == 1 and np.allclose(m.matrix()[:3, 3], [1, 2, 3])


# ---------------------------------------------------------------- tracker

def test_tracker_degenerate_gate_gives_identity():
    tr = ContactTracker()
    a, _ = poke_cloud((0.2, 0.3), 0.8)
    b, _ = poke_cloud((0.8, 0.7), 0.8)
    _, m0 = tr.track_step(a, 0.0)
    assert not m0.confident  # nothing to compare against yet
    patch, m = tr.track_step(b, 0.025)
    assert patch is not None
    assert np.array_equal(m.rotation, np.eye(3)) and not m.translation.any()
    assert not m.confident


def test_tracker_follows_sliding_poke(tmp_path):
    tr = ContactTracker()
    cents, truth = [], []
    for k, u in enumerate(np.linspace(0.40, 0.46, 7)):
        cloud, target = poke_cloud((u, 0.5), 0.8)
        patch, m = tr.track_step(cloud, 0.025 * k)
        cents.append(patch.centroid)
        truth.append(target)
        if k:
            assert m.confident
    steps = np.diff(cents, axis=0)
    t_u = SURF.frame(0.43, 0.5)[0]
    cos = steps @ t_u / np.linalg.norm(steps, axis=1)
    assert np.all(cos > 0.9)
    assert np.linalg.norm(np.array(cents) - np.array(truth), axis=1).max() < 2.0
    path = tmp_path / "track.csv"
    tr.write_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == TRACK_COLUMNS and len(rows) == 8
    assert rows[1][-1] == "0" and rows[2][-1] == "1"


def test_track_log_lost_contact(tmp_path):
    tr = ContactTracker()
    flat = ReconstructedCloud(GRID, np.zeros(len(GRID)), np.zeros(len(GRID), int), GRID_UV)
    patch, m = tr.track_step(flat, 1.0)
    assert patch is None and not m.confident
    write_track_log(tr.log, tmp_path / "t.csv")
    assert "nan" in (tmp_path / "t.csv").read_text()

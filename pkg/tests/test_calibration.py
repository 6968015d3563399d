import json
import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from oracles import brute_force_circle, disc_frames
from tactilekit.calibration import (CalibrationBundle, LookupTable, SingularHomographyError,
                                    TableBuilder, TableMissingError, apply_homography,
                                    build_correspondence, detect_circle, four_point_homography,
                                    load_bundle, lookup_gradient, plan_poke_schedule, save_bundle)
from tactilekit.calibration.bundle import BundleFormatError
from tactilekit.calibration.hough import NoContactError, contact_mask, edge_points
from tactilekit.calibration.homography import patch_homography, rectangle_corners
from tactilekit.calibration.lut import cap_gradient
from tactilekit.calibration.procedure import (CalibrationIncompleteError, PokeRecord,
                                              hough_radius_range)
from tactilekit.geometry import tessellate
from tactilekit.imaging import key_to_bins, rgb_key
from tactilekit.optics import membrane_extent, membrane_profile, project_to_image


# ---------------------------------------------------------------- schedule

def test_schedule_counts(surface):
    tess = tessellate(surface, 6, 4)
    sched = plan_poke_schedule(tess, per_quad=5)
    vert = [t for t in sched if t.kind == "vertex"]
    grad = [t for t in sched if t.kind == "gradient"]
    assert len(vert) == 35 and len(grad) == 120
    assert len({t.vertex for t in vert}) == 35
    pts = np.array([t.point for t in sched])
    assert np.abs(surface.surface_residual(pts)).max() < 1e-9
    for t in grad:
        assert tess.quad_at(*t.uv) == t.quad_id
        assert np.allclose(t.normal, surface.normal(*t.uv))
    with pytest.raises(ValueError):
        plan_poke_schedule(tess, per_quad=0)


def test_hough_radius_range_brackets_pokes(bundle):
    lo, hi = hough_radius_range(bundle.surface, bundle.camera, 2.0, [0.4, 1.6])
    assert 2.0 <= lo < hi
    # ranges carry the +-30% slack
    lo0, hi0 = hough_radius_range(bundle.surface, bundle.camera, 2.0, [0.4, 1.6], slack=0.0)
    assert lo == pytest.approx(max(2.0, lo0 * 0.7)) and hi == pytest.approx(hi0 * 1.3)


# ---------------------------------------------------------------- hough

def test_ring_detected_within_a_pixel(rng):
    cur, ref = disc_frames((240, 220), (100, 120), 20, rng)
    (cx, cy), r = detect_circle(cur, ref, (5, 40))
    (ox, oy), orad, _ = brute_force_circle(edge_points(contact_mask(cur, ref)), 5, 40)
    assert math.hypot(cx - 100, cy - 120) < 1.0
    assert math.hypot(cx - ox, cy - oy) < 1.0 and abs(r - orad) < 1.0


def test_reference_against_itself_has_no_contact(rng):
    _, ref = disc_frames((120, 160), (80, 60), 10, rng)
    with pytest.raises(NoContactError):
        detect_circle(ref, ref)


def test_stronger_circle_wins(rng):
    """A full disc beats one cut by the image border (fewer edge votes)."""
    h, w = 160, 260
    a, ref = disc_frames((h, w), (70, 80), 22, rng)
    b, _ = disc_frames((h, w), (250, 80), 26, rng)
    cur = np.maximum(a, b)
    edges = edge_points(contact_mask(cur, ref))
    (ox, oy), _, _ = brute_force_circle(edges, 15, 30)
    (cx, cy), _ = detect_circle(cur, ref, (15, 30))
    assert math.hypot(ox - 70, oy - 80) < 1.5
    assert math.hypot(cx - 70, cy - 80) < 1.0


def test_detect_circle_rejects_mismatched_frames(rng):
    cur, _ = disc_frames((100, 100), (50, 50), 10, rng)
    with pytest.raises(ValueError):
        detect_circle(cur, cur[:50])


# ---------------------------------------------------------------- homography

def test_axis_aligned_rectangle_gives_scale_translation():
    corners = np.array([[10.0, 20.0], [50.0, 20.0], [50.0, 45.0], [10.0, 45.0]])
    H, (rows, cols) = patch_homography(corners)
    assert abs(H[2, 0]) < 1e-12 and abs(H[2, 1]) < 1e-12
    assert abs(H[0, 1]) < 1e-12 and abs(H[1, 0]) < 1e-12
    assert (rows, cols) == (26, 41)


def test_homography_exact_on_corners(rng):
    for _ in range(20):
        src = np.array([[0, 0], [40, 0], [40, 30], [0, 30]], float) + rng.uniform(-8, 8, (4, 2))
        H, (rows, cols) = patch_homography(src)
        assert np.abs(apply_homography(H, src) - rectangle_corners(rows, cols)).max() < 1e-6


def test_singular_homography():
    with pytest.raises(SingularHomographyError):
        four_point_homography([[0, 0], [1, 1], [2, 2], [3, 3]], [[0, 0], [1, 0], [1, 1], [0, 1]])


def test_bundle_structure(bundle):
    b = bundle
    assert len(b.homographies) == b.n_quads == len(b.tables)
    for H in b.homographies:
        assert abs(np.linalg.det(H)) > 1e-12
    assert len(b.cloud) == int(np.prod(b.rectified_resolution, axis=1).sum())
    for t in b.tables:
        assert len(t) > 0 and np.all(np.isfinite(t.gradients))
    assert np.abs(b.surface.surface_residual(b.cloud.points)).max() < 1e-6


def test_rectified_patch_centres_match_projection(bundle):
    """The pixel sampled for each patch centre agrees with projecting it through the camera."""
    b = bundle
    for q in range(b.n_quads):
        rows, cols = b.rectified_resolution[q]
        sel = np.flatnonzero(b.cloud.quad_id == q)
        centre = sel[(rows // 2) * cols + cols // 2]
        px = project_to_image(b.camera, b.cloud.points[centre])
        assert np.linalg.norm(px - b.cloud.pixels[centre]) < 2.0


def test_lens_correction_shrinks_sampling_error(bundle):
    """Homographies alone cannot follow the wide-angle lens inside a quad."""
    from tactilekit.calibration.bundle import correspondence_from_vertices

    _, _, plain = correspondence_from_vertices(bundle.surface, bundle.tessellation, bundle.vertex_pixels)
    truth = project_to_image(bundle.camera, plain.points)
    before = np.linalg.norm(truth - plain.pixels, axis=1)
    after = np.linalg.norm(truth - bundle.cloud.pixels, axis=1)
    assert np.median(after) < 0.5 * np.median(before)
    assert np.max(after) < np.max(before)


def test_missing_vertex_names_it(bundle):
    tess = bundle.tessellation
    recs = []
    for t in plan_poke_schedule(tess, 1):
        if t.kind != "vertex":
            continue
        i = tess.vertex_index(*t.vertex)
        hit = None if t.vertex == (2, 3) else tuple(bundle.vertex_pixels[i])
        recs.append(PokeRecord(t, None, hit, 5.0 if hit else 0.0, -1))
    with pytest.raises(CalibrationIncompleteError) as exc:
        build_correspondence(recs, tess)
    assert exc.value.vertex == (2, 3)
    assert "(2, 3)" in str(exc.value)


# ---------------------------------------------------------------- tables

def test_cap_gradient_centre_and_sphere_slope():
    R, d, radius_px = 2.0, 1.0, 30.0
    assert np.allclose(cap_gradient(0.0, 0.0, radius_px, R, d), 0.0)
    r_c, _ = membrane_profile(R, d)
    scale = membrane_extent(R, d) / radius_px  # mm per px
    rho = 0.6 * r_c
    r_px = rho / scale
    g = cap_gradient(r_px, 0.0, radius_px, R, d)
    analytic = rho / math.sqrt(R * R - rho * rho)  # slope of the sphere
    assert np.linalg.norm(g) == pytest.approx(analytic * scale, rel=1e-9)
    # slope points back toward the centre (height decreases outward)
    assert g[0] < 0


def test_table_averaging_idempotent(rng):
    rgb = rng.integers(-60, 60, (200, 3))
    g = rng.normal(size=(200, 2))
    once = TableBuilder(5)
    once.add(0, rgb, g)
    twice = TableBuilder(5)
    twice.add(0, rgb, g)
    twice.add(0, rgb, g)
    a, b = once.table(0), twice.table(0)
    assert np.array_equal(a.keys, b.keys)
    assert np.allclose(a.gradients, b.gradients, atol=1e-12)
    assert np.array_equal(2 * a.counts, b.counts)
    with pytest.raises(TableMissingError):
        once.table(3)


def _table(keys_rgb, grads):
    keys = rgb_key(np.asarray(keys_rgb))
    order = np.argsort(keys)
    return LookupTable(0, keys[order], np.asarray(grads, float)[order], np.ones(len(keys), int))


def test_lookup_exact_and_midpoint():
    t = _table([[0, 0, 0], [32, 0, 0]], [[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(lookup_gradient([0, 0, 0], 0, [t]), [1.0, 0.0])
    # 16 units is one 5-bit bin: equidistant from both keys
    mid = lookup_gradient([16, 0, 0], 0, [t], k=2)
    assert np.allclose(mid, [0.5, 0.5])


def test_lookup_matches_bruteforce_idw(rng):
    rgb = rng.integers(-200, 200, (300, 3))
    keys = np.unique(rgb_key(rgb))
    grads = rng.normal(size=(len(keys), 2))
    t = LookupTable(0, keys, grads, np.ones(len(keys), int))
    bins = key_to_bins(keys).astype(float)
    queries = rng.integers(-256, 255, (200, 3))
    got = lookup_gradient(queries, 0, [t], k=4)
    for qv, gv in zip(queries, got):
        qk = rgb_key(qv)
        hit = np.flatnonzero(keys == qk)
        if len(hit):
            assert np.allclose(gv, grads[hit[0]])
            continue
        d = np.linalg.norm(bins - key_to_bins(qk).astype(float), axis=1)
        nn = np.argsort(d, kind="stable")[:4]
        w = 1 / d[nn]
        # ties at the 4th neighbour may pick a different key at equal distance
        if np.isclose(d[nn[-1]], np.sort(d)[4]):
            continue
        assert np.allclose(gv, (w[:, None] * grads[nn]).sum(0) / w.sum())
        lo, hi = grads[nn].min(0), grads[nn].max(0)
        assert np.all(gv >= lo - 1e-12) and np.all(gv <= hi + 1e-12)


def test_lookup_missing_table():
    empty = LookupTable(0, np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(0, int))
    with pytest.raises(TableMissingError):
        lookup_gradient([0, 0, 0], 0, [empty])
    with pytest.raises(TableMissingError):
        lookup_gradient([0, 0, 0], 5, [empty])


# ---------------------------------------------------------------- bundle io

def test_bundle_round_trip(bundle, tmp_path):
    side = json.loads(save_bundle(bundle, tmp_path / "b.tkb").read_text())
    p = tmp_path / "b.tkb"
    assert side["tessellation"] == {"n_u": 6, "n_v": 4} and side["quantization_bits"] == 5
    assert side["version"] == 1
    b2 = load_bundle(p)
    assert isinstance(b2, CalibrationBundle)
    assert np.array_equal(b2.homographies, bundle.homographies)
    assert np.array_equal(b2.cloud.points, bundle.cloud.points)
    assert np.array_equal(b2.reference_frame.pixels, bundle.reference_frame.pixels)
    for a, b in zip(bundle.tables, b2.tables):
        assert np.array_equal(a.keys, b.keys) and np.array_equal(a.gradients, b.gradients)
    # saving the loaded bundle reproduces the same bytes
    save_bundle(b2, tmp_path / "c.tkb")
    assert p.read_bytes() == (tmp_path / "c.tkb").read_bytes()
    assert b2.correction is not None
    assert np.array_equal(b2.correction.offsets, bundle.correction.offsets)
    assert np.array_equal(b2.jacobian.values, bundle.jacobian.values)
    assert side["table_units"] == "slope"


def test_bundle_rejects_garbage(tmp_path):
    p = tmp_path / "x.tkb"
    p.write_bytes(b"not a bundle at all")
    with pytest.raises(BundleFormatError):
        load_bundle(p)


def test_calibration_report(calibrated):
    _, report = calibrated
    rep = report.to_dict()
    assert rep["vertex_pokes"] == 35 and rep["gradient_pokes"] == 120
    assert rep["total_pokes"] == 155
    assert len(rep["table_sizes"]) == 24


def test_downsampled_bundle(bundle):
    half = bundle.downsampled(2)
    assert half.resolution == (320, 240)
    assert half.reference_frame.resolution == (320, 240)
    assert len(half.cloud) < len(bundle.cloud)
    # slope tables are resolution free; the pixel Jacobian doubles instead
    assert bundle.table_units == "slope"
    assert np.array_equal(half.tables[0].gradients, bundle.tables[0].gradients)
    assert np.allclose(half.jacobian.values, 2 * bundle.jacobian.values)
    full, small = bundle.gradient_maps(), half.gradient_maps()
    assert small.shape == (240, 320, 2, 2)
    # pixel (c, r) at half resolution covers full-resolution (2c + 0.5, 2r + 0.5)
    assert np.allclose(small[60, 80], full[120:122, 160:162].mean(axis=(0, 1)) * 2, rtol=0.02)


def test_mm_per_px_tables_scale_on_downsample(bundle):
    from dataclasses import replace
    legacy = replace(bundle, jacobian=None)
    assert legacy.table_units == "mm_per_px" and legacy.gradient_maps() is None
    half = legacy.downsampled(2)
    assert half.jacobian is None
    assert np.allclose(half.tables[0].gradients, 2 * bundle.tables[0].gradients)


def test_slope_jacobian_matches_projection(bundle):
    """The stored pixel -> tangent-plane map agrees with the camera model."""
    from tactilekit.optics import project_to_image
    s, cam = bundle.surface, bundle.camera
    J = bundle.gradient_maps()
    e = 1e-5
    for uv in [(0.4, 0.5), (0.6, 0.2), (0.2, 0.8), (0.8, 0.6)]:
        P = lambda a, b: project_to_image(cam, s.point(a, b))
        X = lambda a, b: s.point(a, b)
        tu, tv, _ = s.frame(*uv)
        pu = (P(uv[0] + e, uv[1]) - P(uv[0] - e, uv[1])) / (2 * e)
        pv = (P(uv[0], uv[1] + e) - P(uv[0], uv[1] - e)) / (2 * e)
        xu = (X(uv[0] + e, uv[1]) - X(uv[0] - e, uv[1])) / (2 * e)
        xv = (X(uv[0], uv[1] + e) - X(uv[0], uv[1] - e)) / (2 * e)
        A = np.array([[xu @ tu, xv @ tu], [xu @ tv, xv @ tv]])
        truth = A @ np.linalg.inv(np.array([pu, pv]).T)
        c, r = np.rint(P(*uv)).astype(int)
        assert np.abs(J[r, c] - truth).max() < 0.05 * np.abs(truth).max()

"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line and records it for the
summary block that conftest prints at the end of the run.
"""

import math
import threading
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import test_control
import test_geometry
import test_rolling
import test_tracking
from acceptance_log import record as record_acceptance
from oracles import brute_force_circle, dense_poisson, disc_frames, rotation_error_deg
from tactilekit.bench import bench_resolution, sample_frames
from tactilekit.calibration import detect_circle, load_bundle
from tactilekit.calibration.hough import contact_mask, edge_points
from tactilekit.calibration.procedure import random_probe_targets
from tactilekit.geometry import FingertipSurface, tessellate
from tactilekit.objects import SHAPE_NAMES
from tactilekit.optics import Renderer, simulate_poke
from tactilekit.poisson import integrate_gradients, solve_poisson_dst
from tactilekit.reconstruction import Reconstructor
from tactilekit.stream import StreamConfig, cycle_source, measure_latency, measure_rate, serve
from tactilekit.tracking import icp_register


def report(name, ok, detail):
    record_acceptance(name, ok, detail)
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------- 1

def test_poisson_solver():
    rng = np.random.default_rng(1)
    worst = 0.0
    for h in (8, 16, 32, 48, 64):
        for w in (8, 24, 40, 64):
            rhs = rng.normal(size=(h, w))
            worst = max(worst, float(np.abs(solve_poisson_dst(rhs) - dense_poisson(rhs)).max()))
    worst_rms = 0.0
    for h, w in [(8, 8), (32, 32), (64, 48), (64, 64)]:
        x, y = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        kx, ky = np.pi / w, np.pi / h
        height = np.sin(kx * x) * np.sin(ky * y)
        gx = kx * np.cos(kx * x) * np.sin(ky * y)
        gy = ky * np.sin(kx * x) * np.cos(ky * y)
        got = integrate_gradients(gx, gy)
        worst_rms = max(worst_rms, float(np.sqrt(np.mean((got - height) ** 2)) / height.max()))
    report("poisson", worst < 1e-8 and worst_rms < 0.01,
           f"DST vs dense max diff {worst:.2e} (< 1e-8), eigenfunction RMS {100 * worst_rms:.3f}% (< 1%)")


# ---------------------------------------------------------------- 2

def test_calibration_round_trip(cli_calibration):
    assert cli_calibration["rc"] == 0
    b = load_bundle(cli_calibration["path"])
    sim = Renderer(b.surface, b.camera)
    rec = Reconstructor(b)
    rng = np.random.default_rng(2024)
    targets = random_probe_targets(tessellate(b.surface, b.n_u, b.n_v), 20, rng, depth_range=(0.3, 1.5))
    ok, worst_peak, worst_loc = 0, 0.0, 0.0
    for t in targets:
        frame = sim.render(sim.poke_state(t.point, b.probe_radius, t.depth), noise_sigma=1.0, rng=rng)
        c = rec(frame)
        pe = abs(c.peak - t.depth) / t.depth
        le = float(np.linalg.norm(b.cloud.points[c.peak_index] - t.point))
        worst_peak, worst_loc = max(worst_peak, pe), max(worst_loc, le)
        ok += pe <= 0.10 and le <= 1.0
    secs = cli_calibration["seconds"]
    report("calibration round-trip", ok >= 18 and secs < 120,
           f"{ok}/20 pokes within 10% peak and 1 mm (need 18), worst {100 * worst_peak:.1f}% / "
           f"{worst_loc:.2f} mm, calibrate took {secs:.1f} s (< 120 s)")


# ---------------------------------------------------------------- 3

def test_hough_against_brute_force():
    rng = np.random.default_rng(3)
    ok, worst_c, worst_r = 0, 0.0, 0.0
    radii = np.linspace(10, 60, 20)
    for r in radii:
        r = float(np.round(r + rng.uniform(-0.4, 0.4), 1))
        h, w = 200, 260
        c = (rng.uniform(r + 8, w - r - 8), rng.uniform(r + 8, h - r - 8))
        cur, ref = disc_frames((h, w), c, r, rng, noise=2.0)
        lo, hi = max(5, int(r) - 8), int(r) + 8
        (cx, cy), rad = detect_circle(cur, ref, (lo, hi))
        (ox, oy), orad, _ = brute_force_circle(edge_points(contact_mask(cur, ref)), lo, hi)
        dc, dr = math.hypot(cx - ox, cy - oy), abs(rad - orad)
        worst_c, worst_r = max(worst_c, dc), max(worst_r, dr)
        ok += dc <= 1.0 and dr <= 1.0
    report("hough", ok == 20,
           f"{ok}/20 circles (r 10-60 px, noise 2/255) within 1 px of brute force, worst centre "
           f"{worst_c:.2f} px, radius {worst_r:.2f} px")


# ---------------------------------------------------------------- 4

def test_icp_random_motions():
    s = FingertipSurface()
    rng = np.random.default_rng(4)
    uu, vv = np.meshgrid(np.linspace(0, 1, 400), np.linspace(0, 1, 250))
    grid = s.point(uu.ravel(), vv.ravel()).reshape(-1, 3)
    ok, monotone, worst_a, worst_t = 0, 0, 0.0, 0.0
    for _ in range(50):
        u0, v0 = rng.uniform(0.25, 0.75, 2)
        f = simulate_poke(s, s.point(u0, v0), 2.0, rng.uniform(0.5, 1.2), grid)
        m = f.displacement > 0.5 * f.displacement.max()
        pts = grid[m] - f.displacement[m, None] * s.normal_at(grid[m])
        axis = rng.normal(size=3)
        R = Rotation.from_rotvec(np.deg2rad(rng.uniform(0, 10)) * axis / np.linalg.norm(axis)).as_matrix()
        t = rng.normal(size=3)
        t *= rng.uniform(0, 1) / np.linalg.norm(t)
        c = pts.mean(axis=0)
        moved = (pts - c) @ R.T + c + t
        mo = icp_register(pts, moved, max_iter=500, tol=1e-9)
        ea = rotation_error_deg(mo.rotation, R)
        et = float(np.linalg.norm(mo.translation - (c + t - R @ c)))
        worst_a, worst_t = max(worst_a, ea), max(worst_t, et)
        ok += ea <= 0.2 and et <= 0.02
        monotone += bool(np.all(np.diff(mo.history) <= 1e-12))
    report("icp", ok >= 48 and monotone == 50,
           f"{ok}/50 motions within 0.2 deg / 0.02 mm (need 48), worst {worst_a:.3f} deg / "
           f"{worst_t:.4f} mm, residual non-increasing in {monotone}/50")


# ---------------------------------------------------------------- 5

def test_rolling_experiment(cli_roll_all):
    import csv
    assert cli_roll_all["rc"] == 0
    with open(cli_roll_all["path"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    per = {n: sum(r["outcome"] == "success" for r in rows if r["object"] == n) for n in SHAPE_NAMES}
    total = sum(per.values())
    only_golf = all(per[n] == 10 for n in SHAPE_NAMES if n != "golfball")
    secs = cli_roll_all["seconds"]
    report("rolling", len(rows) == 50 and total >= 45 and only_golf and secs < 300,
           f"{total}/50 successes (need 45, only golfball may fail) "
           + ", ".join(f"{n} {k}/10" for n, k in per.items()) + f", {secs:.0f} s (< 300 s)")


# ---------------------------------------------------------------- 6

def test_throughput(bundle):
    frames = sample_frames(bundle)
    half = bench_resolution(bundle, frames, 2, repeats=40)["end_to_end"]
    full = bench_resolution(bundle, frames, 1, repeats=20)["end_to_end"]
    report("throughput", half["mean_ms"] <= 25.0,
           f"320x240 end to end {half['mean_ms']:.1f} ms ({half['hz']:.0f} Hz, need >= 40 Hz); "
           f"640x480 {full['mean_ms']:.1f} ms ({full['hz']:.0f} Hz, informational)")


# ---------------------------------------------------------------- 7

def test_streaming(bundle):
    sim = Renderer(bundle.surface, bundle.camera, supersample=1)
    rng = np.random.default_rng(7)
    s = bundle.surface
    frames = [sim.render(sim.poke_state(s.point(u, 0.5), 2.0, 0.8), noise_sigma=3.0, rng=rng)
              for u in np.linspace(0.2, 0.8, 8)]
    assert frames[0].pixels.shape == (480, 640, 3)
    with serve(StreamConfig(port=0, resolution=(640, 480), target_fps=95), cycle_source(frames)) as svc:
        fast = measure_rate(svc.url, 3.0)
        lat = measure_latency(svc.url, n=100)
        slow = {}
        th = threading.Thread(target=lambda: slow.update(measure_rate(svc.url, 3.0, delay=0.05)))
        th.start()
        time.sleep(0.3)
        fast2 = measure_rate(svc.url, 2.0)
        th.join(15)
    isolated = fast2["fps"] >= 85 and slow["dropped"] > 0
    report("streaming", fast["fps"] >= 85 and lat.p50 < 40 and isolated,
           f"640x480 loopback {fast['fps']:.1f} fps (need 85), p50 latency {lat.p50:.1f} ms (< 40); "
           f"beside a slow reader ({slow['fps']:.1f} fps, {slow['dropped']} frames skipped) "
           f"the fast client kept {fast2['fps']:.1f} fps")


# ---------------------------------------------------------------- 8

PROPERTY_SUITES = [
    ("tiling completeness", test_geometry.test_tiling_completeness),
    ("rotation orthonormality", test_tracking.test_icp_rotation_orthonormal),
    ("hybrid orthogonality", test_control.test_hybrid_orthogonality),
    ("no-slip arc length", test_rolling.test_no_slip_arc_consistency),
    ("contact scale consistency", test_tracking.test_extract_scale_consistency),
]


def test_property_suites():
    passed, failed = [], []
    for name, fn in PROPERTY_SUITES:
        assert fn.hypothesis.inner_test is not None
        assert fn._hypothesis_internal_use_settings.max_examples == 1000
        try:
            fn()
            passed.append(name)
        except Exception as exc:  # report every suite before failing
            failed.append(f"{name} ({type(exc).__name__})")
    report("property suites", not failed,
           f"{len(passed)}/5 suites green at 1000 cases each" + (f"; failed: {', '.join(failed)}" if failed else ""))

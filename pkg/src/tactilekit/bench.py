"""Micro-benchmarks of the reconstruction hot path at full and half resolution."""

from __future__ import annotations

import json
import platform
import time
from importlib import resources

import cv2
import numpy as np
import scipy

from .calibration.bundle import CalibrationBundle
from .imaging import difference_image, downsample
from .optics import Renderer
from .poisson import solve_poisson_dst
from .reconstruction import Reconstructor, gradients_from_frame, poisson_solve, warp_patch
from .tracking import extract_contact, icp_register

SCHEMA_VERSION = 1


def load_schema() -> dict:
    return json.loads(resources.files("tactilekit").joinpath("schemas/bench.schema.json").read_text())


def validate_report(report: dict):
    import jsonschema

    jsonschema.validate(report, load_schema())


def _timeit(fn, repeats: int, warmup: int = 2) -> dict:
    for _ in range(warmup):
        fn()
    t = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        t.append(time.perf_counter() - t0)
    t = np.array(t) * 1e3
    return {"mean_ms": float(t.mean()), "median_ms": float(np.median(t)), "min_ms": float(t.min()),
            "max_ms": float(t.max()), "repeats": int(repeats)}


def sample_frames(bundle: CalibrationBundle, n: int = 8, seed: int = 0, depth=(0.5, 1.2)):
    """Full-resolution poke frames at random sensed locations."""
    rng = np.random.default_rng(seed)
    r = Renderer(bundle.surface, bundle.camera, supersample=1)
    out = []
    for _ in range(n):
        u, v = rng.uniform(0.2, 0.8, 2)
        st = r.poke_state(bundle.surface.point(u, v), bundle.probe_radius, rng.uniform(*depth))
        out.append(r.render(st, noise_sigma=1.0, rng=rng, timestamp=0))
    return out


def bench_resolution(bundle: CalibrationBundle, frames, factor: int, repeats: int = 20) -> dict:
    rec = Reconstructor(bundle, downsample=factor)
    b = rec.bundle
    pix = [downsample(f.pixels, factor) for f in frames]
    k = {"i": 0}

    def nxt():
        k["i"] += 1
        return pix[k["i"] % len(pix)]

    diffs = [difference_image(p, b.reference_frame, b.threshold) for p in pix]
    fields = [gradients_from_frame(d, b, rec.qmap, rec.table, rec.jmap) for d in diffs]
    heights = [poisson_solve(f) for f in fields]
    gx = fields[0].gx

    out = {}
    rhs = np.ascontiguousarray(gx)
    out["poisson"] = _timeit(lambda: solve_poisson_dst(rhs), max(repeats, 60), warmup=5)
    out["lookup"] = _timeit(lambda: gradients_from_frame(diffs[k["i"] % len(diffs)], b, rec.qmap, rec.table,
                                                         rec.jmap),
                            repeats)
    out["warp"] = _timeit(lambda: [warp_patch(heights[0], q, b) for q in range(b.n_quads)], repeats)
    cloud = rec(pix[0])
    patch = extract_contact(cloud)
    src = patch.points[:: max(1, len(patch.points) // 400)]
    rng = np.random.default_rng(0)
    ang = np.deg2rad(3.0)
    R = cv2.Rodrigues(np.array([0.0, 0.0, ang]))[0]
    tgt = (patch.points - patch.centroid) @ R.T + patch.centroid + rng.normal(0, 0.01, 3)
    out["icp"] = _timeit(lambda: icp_register(src, tgt), max(3, repeats // 4), warmup=1)
    rec.timings.clear()
    e2e = _timeit(lambda: rec(nxt()), repeats)
    e2e["hz"] = 1000.0 / e2e["mean_ms"]
    out["end_to_end"] = e2e
    return out


def poisson_scaling(small, large, repeats: int = 60) -> float:
    """Median time ratio of two DST solves, measured interleaved so that
    drifting machine load hits both sizes alike."""
    a = np.random.default_rng(0).normal(size=small)
    b = np.random.default_rng(1).normal(size=large)
    for _ in range(5):
        solve_poisson_dst(a)
        solve_poisson_dst(b)
    ta, tb = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        solve_poisson_dst(a)
        t1 = time.perf_counter()
        solve_poisson_dst(b)
        t2 = time.perf_counter()
        ta.append(t1 - t0)
        tb.append(t2 - t1)
    return float(np.median(tb) / np.median(ta))


def run_bench(bundle: CalibrationBundle, repeats: int = 20, seed: int = 0, factors=(1, 2)) -> dict:
    frames = sample_frames(bundle, seed=seed)
    results, res_names = {}, []
    w, h = bundle.resolution
    for f in factors:
        name = f"{w // f}x{h // f}"
        res_names.append(name)
        results[name] = bench_resolution(bundle, frames, f, repeats)
    ratio = None
    full, half = f"{w}x{h}", f"{w // 2}x{h // 2}"
    if full in results and half in results:
        ratio = poisson_scaling((h // 2, w // 2), (h, w), max(repeats, 60))
    return {
        "schema_version": SCHEMA_VERSION,
        "environment": {"python": platform.python_version(), "numpy": np.__version__,
                        "scipy": scipy.__version__, "opencv": cv2.__version__,
                        "machine": platform.machine()},
        "resolutions": res_names,
        "results": results,
        "poisson_ratio": ratio,
    }

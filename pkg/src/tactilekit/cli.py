"""``tactilekit`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every subcommand accepts ``--config run.toml``; explicit flags win over
the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, calibration_settings, load_config

log = logging.getLogger("tactilekit")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None))


def _bundle_path(args, cfg: RunConfig) -> Path:
    p = Path(args.bundle) if getattr(args, "bundle", None) else cfg.resolve(cfg.paths.bundle)
    if not p.is_file():
        raise UsageError(f"bundle not found: {p}")
    return p


def _load_bundle(args, cfg):
    from .calibration.bundle import BundleFormatError, load_bundle

    path = _bundle_path(args, cfg)
    try:
        return load_bundle(path)
    except BundleFormatError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _write_json(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_calibrate(args) -> int:
    from .calibration import CalibrationIncompleteError, calibrate, save_bundle
    from .plotting import plot_calibration

    cfg = _config(args)
    if args.seed is not None:
        cfg.calibration.seed = args.seed
    out = Path(args.out) if args.out else cfg.resolve(cfg.paths.bundle)
    settings = calibration_settings(cfg)
    try:
        bundle, report = calibrate(settings)
    except CalibrationIncompleteError as exc:
        log.error("calibration incomplete: %s", exc)
        print(f"calibration incomplete: vertex {exc.vertex} was not detected", file=sys.stderr)
        return EXIT_FAIL
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out)
    rep = report.to_dict()
    report_path = Path(args.report) if args.report else out.with_name(out.stem + "_report.json")
    _write_json(report_path, rep)
    if not args.no_plots:
        plot_calibration(bundle, rep, report_path.with_suffix(".png"))
    print(f"wrote {out} ({rep['vertex_pokes']} vertex + {rep['gradient_pokes']} gradient pokes, "
          f"{len(rep['detection_failures'])} detection failures) in {rep['runtime_s']:.1f} s")
    return EXIT_OK


def _frames_from_source(source: str, max_frames: int):
    """Yields (name, frame or exception) from a directory or a stream URL."""
    from .io import CorruptFrameError, list_frames, read_frame

    if source.startswith(("http://", "https://")):
        from .stream import client_connect

        n = max_frames or 100
        for k, frame in enumerate(client_connect(source)):
            yield f"frame_{frame.sequence:06d}", frame
            if k + 1 >= n:
                break
        return
    d = Path(source)
    if not d.is_dir():
        raise UsageError(f"frame directory not found: {d}")
    files = list_frames(d)
    if max_frames:
        files = files[:max_frames]
    for i, f in enumerate(files):
        try:
            yield f.stem, read_frame(f, i)
        except CorruptFrameError as exc:
            yield f.stem, exc


def cmd_reconstruct(args) -> int:
    from .io import write_height_png, write_ply
    from .plotting import plot_height_map, plot_timing_histogram
    from .reconstruction import Reconstructor

    cfg = _config(args)
    source = args.frames or cfg.reconstruct.source
    if not source:
        raise UsageError("no frame source given (--frames DIR|URL)")
    bundle = _load_bundle(args, cfg)
    factor = args.downsample or cfg.reconstruct.downsample
    rec = Reconstructor(bundle, downsample=factor)
    out = Path(args.out) if args.out else cfg.resolve(cfg.paths.output_dir) / "clouds"
    out.mkdir(parents=True, exist_ok=True)
    times, written, skipped = [], 0, 0
    last = None
    for name, frame in _frames_from_source(source, args.max_frames or cfg.reconstruct.max_frames):
        if isinstance(frame, Exception):
            log.error("skipping %s: %s", name, frame)
            skipped += 1
            continue
        try:
            cloud = rec(frame)
        except Exception as exc:  # wrong size and the like: skip, keep going
            log.error("skipping %s: %s", name, exc)
            skipped += 1
            continue
        times.append(rec.timings[-1] * 1e3)
        write_ply(out / f"{name}.ply", cloud.points, cloud.displacement)
        if args.heights:
            write_height_png(out / f"{name}_height.png", rec.last_height.values)
        last = rec.last_height
        written += 1
    if written == 0:
        log.warning("no frames reconstructed from %s", source)
        print(f"warning: no frames reconstructed from {source}", file=sys.stderr)
    summary = {"frames": written, "skipped": skipped, "resolution": list(rec.bundle.resolution),
               "times_ms": times,
               "mean_ms": float(np.mean(times)) if times else None,
               "p95_ms": float(np.percentile(times, 95)) if times else None,
               "hz": float(1000.0 / np.mean(times)) if times else None}
    _write_json(out / "timing.json", summary)
    if not args.no_plots:
        plot_timing_histogram(times, out / "timing_hist.png")
        if last is not None:
            plot_height_map(last.values, out / "last_height.png")
    if times:
        print(f"{written} frames at {rec.bundle.resolution[0]}x{rec.bundle.resolution[1]}: "
              f"mean {summary['mean_ms']:.1f} ms ({summary['hz']:.0f} Hz), {skipped} skipped")
    return EXIT_OK


def _object_list(names):
    from .objects import OBJECTS

    out = []
    for n in names:
        if n == "all":
            out.extend(OBJECTS)
        elif n in OBJECTS:
            out.append(n)
        else:
            raise UsageError(f"unknown object {n!r}; valid shapes: {', '.join(OBJECTS)}, all")
    return list(dict.fromkeys(out))


def cmd_roll(args) -> int:
    from .control import ControllerGains, TargetRegion
    from .io import write_csv
    from .plotting import plot_rolling
    from .rolling import SimConfig, run_experiment

    cfg = _config(args)
    names = _object_list([args.object] if args.object else cfg.rolling.objects)
    bundle = _load_bundle(args, cfg)
    c, r = cfg.controller, cfg.rolling
    sim_cfg = SimConfig(timeout=r.timeout, region=TargetRegion(*r.region),
                        gains=ControllerGains(c.setpoint, c.k_f, c.speed, c.max_normal_speed))
    trials = args.trials or r.trials
    seed = r.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else cfg.resolve(cfg.paths.output_dir) / "results.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    results, summary = run_experiment(names, trials, bundle, seed=seed, config=sim_cfg)
    rows = [{"object": x.object, "trial": x.trial, "outcome": x.outcome,
             "duration_s": f"{x.duration:.3f}"} for x in results]
    write_csv(out, rows, ["object", "trial", "outcome", "duration_s"])
    _write_json(out.with_suffix(".json"), summary)
    if not args.no_plots:
        plot_rolling(results, out.with_suffix(".png"), sim_cfg.region)
    for name, d in summary["objects"].items():
        print(f"{name}: {d['success']}/{d['trials']} success"
              + "".join(f", {d[k]} {k}" for k in ("fell_out", "overshoot", "timeout") if d[k]))
    print(f"total: {summary['successes']}/{summary['trials']}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench, validate_report
    from .plotting import plot_bench

    cfg = _config(args)
    bundle = _load_bundle(args, cfg)
    report = run_bench(bundle, repeats=args.repeats or cfg.bench.repeats, seed=cfg.bench.seed)
    validate_report(report)
    out = Path(args.out) if args.out else cfg.resolve(cfg.paths.output_dir) / "bench.json"
    _write_json(out, report)
    if not args.no_plots:
        plot_bench(report, out.with_suffix(".png"))
    for res, r in report["results"].items():
        print(f"{res}: end-to-end {r['end_to_end']['mean_ms']:.1f} ms ({r['end_to_end']['hz']:.0f} Hz), "
              f"poisson {r['poisson']['median_ms']:.2f} ms")
    if report["poisson_ratio"] is not None:
        print(f"poisson scaling full/half: {report['poisson_ratio']:.2f}x")
    return EXIT_OK


def _demo_frames(bundle, n: int, seed: int, resolution):
    from .optics import Renderer

    rng = np.random.default_rng(seed)
    cam = bundle.camera if tuple(resolution) == tuple(bundle.resolution) else \
        bundle.camera.scaled(resolution[0] / bundle.resolution[0])
    r = Renderer(bundle.surface, cam, supersample=1)
    out = []
    for k in range(n):
        u = 0.2 + 0.6 * (k % 20) / 19.0
        st = r.poke_state(bundle.surface.point(u, 0.5), bundle.probe_radius, 0.8)
        out.append(r.render(st, noise_sigma=1.0, rng=rng, timestamp=0))
    return out


def cmd_serve(args) -> int:
    from .stream import StreamConfig, StreamStartupError, cycle_source, serve

    cfg = _config(args)
    s = cfg.stream
    sc = StreamConfig(host=args.host or s.host, port=s.port if args.port is None else args.port,
                      resolution=tuple(s.resolution), target_fps=args.fps or s.target_fps,
                      jpeg_quality=args.quality or s.jpeg_quality)
    bundle_path = Path(args.bundle) if args.bundle else cfg.resolve(cfg.paths.bundle)
    if bundle_path.is_file():
        from .calibration import load_bundle

        frames = _demo_frames(load_bundle(bundle_path), 40, 0, sc.resolution)
    else:
        from .geometry import FingertipSurface
        from .optics import Renderer, default_camera

        surf = FingertipSurface()
        r = Renderer(surf, default_camera(surf, sc.resolution), supersample=1)
        frames = [r.render(r.poke_state(surf.point(0.2 + 0.03 * k, 0.5), 2.0, 0.8), timestamp=0)
                  for k in range(20)]
    try:
        svc = serve(sc, cycle_source(frames))
    except StreamStartupError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    print(f"serving {sc.resolution[0]}x{sc.resolution[1]} at {sc.target_fps:g} fps on {svc.url}/stream",
          flush=True)
    duration = args.duration if args.duration is not None else s.duration
    try:
        if duration and duration > 0:
            time.sleep(duration)
        else:
            while True:
                time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        svc.stop()
    return EXIT_OK


def cmd_synth(args) -> int:
    """Render demo poke frames to a directory (input for ``reconstruct``)."""
    from .io import write_frame

    cfg = _config(args)
    bundle = _load_bundle(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = bundle.resolution if not args.half else (bundle.resolution[0] // 2, bundle.resolution[1] // 2)
    frames = _demo_frames(bundle, args.n, args.seed, res)
    for i, f in enumerate(frames):
        write_frame(out / f"frame_{i:04d}.png", f)
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tactilekit", description="Vision-based fingertip tactile toolkit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, bundle=True):
        sp.add_argument("--config", help="TOML run configuration")
        if bundle:
            sp.add_argument("--bundle", help="calibration bundle file")
        sp.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    c = sub.add_parser("calibrate", help="run the poke calibration on the simulator")
    common(c, bundle=False)
    c.add_argument("--out", help="bundle path to write")
    c.add_argument("--report", help="JSON report path")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("reconstruct", help="frames (directory or stream URL) to PLY clouds")
    common(r)
    r.add_argument("--frames", help="frame directory or http://host:port stream")
    r.add_argument("--out", help="output directory")
    r.add_argument("--downsample", type=int, help="box-filter factor before reconstruction")
    r.add_argument("--max-frames", type=int, default=0)
    r.add_argument("--heights", action="store_true", help="also write 16-bit PNG height maps")
    r.set_defaults(func=cmd_reconstruct)

    o = sub.add_parser("roll", help="simulated controlled-rolling trials")
    common(o)
    o.add_argument("--object", help="object name or 'all'")
    o.add_argument("--trials", type=int)
    o.add_argument("--seed", type=int)
    o.add_argument("--out", help="results CSV path")
    o.set_defaults(func=cmd_roll)

    b = sub.add_parser("bench", help="timing benchmarks at full and half resolution")
    common(b)
    b.add_argument("--out", help="JSON report path")
    b.add_argument("--repeats", type=int)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("serve", help="stream simulated frames over HTTP")
    common(s)
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--fps", type=float)
    s.add_argument("--quality", type=int)
    s.add_argument("--duration", type=float, help="seconds to serve (default: until Ctrl-C)")
    s.set_defaults(func=cmd_serve)

    y = sub.add_parser("synth", help="render demo frames into a directory")
    common(y)
    y.add_argument("--out", required=True)
    y.add_argument("--n", type=int, default=10)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--half", action="store_true", help="render at half resolution")
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_FAIL
    except Exception as exc:
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

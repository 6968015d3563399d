"""PNG figures for the CLI reports (headless Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

OUTCOME_COLORS = {"success": "tab:green", "fell_out": "tab:red", "overshoot": "tab:orange",
                  "timeout": "tab:gray"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_calibration(bundle, report: dict, path):
    fig, (a, b) = plt.subplots(1, 2, figsize=(11, 4))
    a.imshow(bundle.reference_frame.pixels)
    vp = bundle.vertex_pixels
    a.plot(vp[:, 0], vp[:, 1], "w+", ms=8)
    for q in range(bundle.n_quads):
        c = bundle.quad_corners(q)
        c = np.vstack([c, c[:1]])
        a.plot(c[:, 0], c[:, 1], "w-", lw=0.6)
    a.set_title("reference frame with detected vertices")
    a.axis("off")
    sizes = report.get("table_sizes", [len(t) for t in bundle.tables])
    b.bar(np.arange(len(sizes)), sizes, color="tab:blue")
    b.set_xlabel("quad")
    b.set_ylabel("table entries")
    b.set_title("lookup table size per quad")
    return _save(fig, path)


def plot_timing_histogram(times_ms, path, budget_ms: float = 25.0):
    fig, ax = plt.subplots(figsize=(6, 4))
    t = np.asarray(times_ms, dtype=float)
    if t.size:
        ax.hist(t, bins=min(30, max(5, t.size // 3)), color="tab:blue", alpha=0.8)
        ax.axvline(t.mean(), color="k", ls="--", label=f"mean {t.mean():.1f} ms")
    ax.axvline(budget_ms, color="tab:red", label=f"{1000 / budget_ms:.0f} Hz budget")
    ax.set_xlabel("per-frame reconstruction time (ms)")
    ax.set_ylabel("frames")
    ax.legend()
    return _save(fig, path)


def plot_height_map(height, path, title="height map (mm)"):
    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.imshow(height, cmap="viridis")
    fig.colorbar(im, ax=ax, label="mm")
    ax.set_title(title)
    ax.axis("off")
    return _save(fig, path)


def plot_rolling(results, path, region=None):
    objects = list(dict.fromkeys(r.object for r in results))
    fig, (a, b) = plt.subplots(1, 2, figsize=(12, 4.5))
    bottom = np.zeros(len(objects))
    for outcome, color in OUTCOME_COLORS.items():
        n = np.array([sum(r.object == o and r.outcome == outcome for r in results) for o in objects])
        a.bar(objects, n, bottom=bottom, color=color, label=outcome)
        bottom += n
    a.set_ylabel("trials")
    a.set_title("trial outcomes")
    a.legend(fontsize=8)
    cmap = plt.get_cmap("tab10")
    for i, o in enumerate(objects):
        for k, r in enumerate(x for x in results if x.object == o):
            if not r.trace:
                continue
            t = [e["t"] for e in r.trace]
            u = [e["u"] for e in r.trace]
            b.plot(t, u, color=cmap(i % 10), lw=0.8, alpha=0.7, label=o if k == 0 else None)
    if region is not None:
        b.axhspan(region.u_min, region.u_max, color="tab:green", alpha=0.15, label="target")
    b.set_xlabel("time since grasp (s)")
    b.set_ylabel("contact centroid u")
    b.set_title("sensed contact trajectories")
    b.legend(fontsize=8)
    return _save(fig, path)


def plot_bench(report: dict, path):
    stages = ["poisson", "lookup", "warp", "icp", "end_to_end"]
    res = report["resolutions"]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(res), 1)
    x = np.arange(len(stages))
    for i, r in enumerate(res):
        vals = [report["results"][r][s]["median_ms"] for s in stages]
        ax.bar(x + i * width, vals, width, label=r)
    ax.set_xticks(x + width * (len(res) - 1) / 2, stages)
    ax.set_ylabel("median time (ms)")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)

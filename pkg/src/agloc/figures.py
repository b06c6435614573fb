"""Figure rendering for the report path.

Every function takes report data and writes PNG files into the output
directory, next to the delimited records the harness already wrote. The
compute layer never imports this module; figures are presentation only.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import MetricsReport


def _finish(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_run_figures(report: MetricsReport, out_dir) -> list[Path]:
    """Per-cycle error curves and the final per-trial error distribution."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    trials = sorted({r.trial for r in report.cycles})
    for trial in trials:
        rows = [r for r in report.cycles if r.trial == trial]
        xs = [r.cycle for r in rows if r.trans_err_m is not None]
        ys = [r.trans_err_m for r in rows if r.trans_err_m is not None]
        if xs:
            ax1.plot(xs, ys, marker="o", markersize=3, alpha=0.7,
                     label=f"trial {trial}" if len(trials) <= 8 else None)
    ax1.set_xlabel("cycle")
    ax1.set_ylabel("translational error (m)")
    ax1.set_yscale("log")
    ax1.set_title(f"error per cycle ({report.mode})")
    if len(trials) <= 8:
        ax1.legend(fontsize=7)
    ax1.grid(alpha=0.3)

    errs = [t.trans_err_m for t in report.trials if t.trans_err_m is not None]
    if errs:
        ax2.bar(range(len(errs)), errs, color="tab:blue", alpha=0.8)
        ax2.set_xlabel("trial")
        ax2.set_ylabel("final translational error (m)")
    ax2.set_title(f"success {report.success_rate}, "
                  f"{report.bandwidth_mbps:.2f} Mbps")
    ax2.grid(alpha=0.3, axis="y")
    written.append(_finish(fig, out / "errors.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    stages = ["pair_ms", "stage1_ms", "stage2_ms"]
    means = [float(np.mean([getattr(t, s) for t in report.trials]))
             for s in stages]
    ax.bar(["pair search", "stage 1", "stage 2"], means, color="tab:orange",
           alpha=0.85)
    ax.set_ylabel("mean time per trial (ms)")
    ax.set_title("stage wall time")
    ax.grid(alpha=0.3, axis="y")
    written.append(_finish(fig, out / "timing.png"))
    return written


def render_ablate_figure(reports: dict[str, MetricsReport], out_dir) -> Path:
    """Grouped bars of mean errors per ablation mode."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modes = list(reports.keys())
    trans = [reports[m].mean_trans_err_m or 0.0 for m in modes]
    yaw = [reports[m].mean_yaw_err_deg or 0.0 for m in modes]
    times = [float(np.mean([t.total_ms for t in reports[m].trials])) for m in modes]

    fig, (ax1, ax2, ax3) = plt.subplots(1, 3, figsize=(12, 4))
    ax1.bar(modes, trans, color="tab:blue", alpha=0.85)
    ax1.set_ylabel("mean translational error (m)")
    ax2.bar(modes, yaw, color="tab:green", alpha=0.85)
    ax2.set_ylabel("mean yaw error (deg)")
    ax3.bar(modes, times, color="tab:orange", alpha=0.85)
    ax3.set_ylabel("mean time per trial (ms)")
    ax3.set_yscale("log")
    for ax in (ax1, ax2, ax3):
        ax.grid(alpha=0.3, axis="y")
        ax.tick_params(axis="x", rotation=15)
    return _finish(fig, out / "ablate.png")


def render_bandwidth_figure(rows, out_dir) -> Path:
    """Bandwidth vs keypoint count; rows are protocol BandwidthReport."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ns = [str(r.n) for r in rows]
    ax.bar(ns, [r.mbps for r in rows], color="tab:purple", alpha=0.85)
    for i, r in enumerate(rows):
        ax.text(i, r.mbps, f"{r.mbps:.2f}", ha="center", va="bottom", fontsize=9)
    ax.set_xlabel("keypoints per frame")
    ax.set_ylabel("payload bandwidth (Mbps)")
    ax.set_title(f"per-frame payload at {rows[0].frames_per_second:g} Hz")
    ax.grid(alpha=0.3, axis="y")
    return _finish(fig, out / "bandwidth.png")


def render_bench_figure(result: dict, out_dir) -> Path:
    """Recall and latency of the descriptor index vs the exhaustive scan."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.bar(["recall@1"], [result["recall_at_1"]], color="tab:blue", alpha=0.85)
    ax1.set_ylim(0, 1.05)
    ax1.axhline(0.95, color="k", linestyle="--", linewidth=0.8)
    ax1.set_title(f"recall@1 = {result['recall_at_1']:.3f} "
                  f"(n={result['size']}, ef={result['ef_search']})")
    ax1.grid(alpha=0.3, axis="y")
    ax2.bar(["index", "exhaustive"],
            [result["index_query_ms"], result["brute_query_ms"]],
            color=["tab:green", "tab:red"], alpha=0.85)
    ax2.set_ylabel("mean query time (ms)")
    ax2.grid(alpha=0.3, axis="y")
    return _finish(fig, out / "bench_index.png")

"""Report figures. Rendered with the Agg backend straight to files; every
call strips the writer metadata so repeated runs produce identical bytes."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 120
_SAVE_KW = dict(dpi=DPI, metadata={"Software": None})


def plot_velocity(path: str, run, report=None) -> str:
    """Estimated vs true velocity over time, with degenerate stretches shaded
    and the delay-aligned error in a lower panel."""
    fig, (ax, axe) = plt.subplots(
        2, 1, figsize=(9, 5.4), sharex=True, height_ratios=[2.2, 1]
    )
    if run.has_truth:
        truth = np.interp(run.t - run.smoothed_delay_s, run.frame_t, run.truth_v)
        ax.plot(run.t, truth, color="0.35", lw=1.0, label="truth (delay aligned)")
    ax.plot(run.t, run.v_median, lw=0.7, alpha=0.55, label="median")
    ax.plot(run.t, run.v_corrected, lw=1.2, label="corrected")
    _shade_degenerate(ax, run)
    ax.set_ylabel("forward velocity (m/s)")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.25)

    if run.has_truth:
        t, err = run.error_series("corrected")
        axe.plot(t, err, lw=0.8)
        warm = run.warmup_end_s()
        axe.axvline(warm, color="0.5", ls="--", lw=0.8)
        axe.text(warm, axe.get_ylim()[1], " warm-up end", fontsize=7,
                 va="top", color="0.4")
    _shade_degenerate(axe, run)
    axe.set_xlabel("time (s)")
    axe.set_ylabel("error (m/s)")
    axe.grid(alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def _shade_degenerate(ax, run) -> None:
    deg = np.asarray(run.degenerate, dtype=bool)
    if not deg.any():
        return
    t = run.t
    dt = float(np.median(np.diff(t))) if t.size > 1 else 1.0 / run.fps
    # run-length walk; the arrays are short
    i = 0
    first = True
    while i < deg.size:
        if deg[i]:
            j = i
            while j + 1 < deg.size and deg[j + 1]:
                j += 1
            ax.axvspan(t[i] - dt / 2, t[j] + dt / 2, color="tab:orange",
                       alpha=0.15, lw=0,
                       label="degenerate" if first else None)
            first = False
            i = j + 1
        else:
            i += 1


def plot_timing(path: str, report) -> str:
    """Mean and p95 per pipeline step, horizontal bars in milliseconds."""
    names = sorted(report.timing_mean_ms)
    mean = [report.timing_mean_ms[n] for n in names]
    p95 = [report.timing_p95_ms[n] for n in names]
    y = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(names) + 1.2))
    ax.barh(y + 0.18, mean, height=0.34, label="mean")
    ax.barh(y - 0.18, p95, height=0.34, label="p95", alpha=0.6)
    ax.set_yticks(y, names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("per-frame time (ms)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.25, axis="x")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_depth_scores(path: str, scores) -> str:
    """Median relative depth error per method, with the 5% mark."""
    names = [s.method for s in scores]
    med = [100 * s.median_rel_err for s in scores]
    p90 = [100 * s.p90_rel_err for s in scores]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(x - 0.17, med, width=0.34, label="median")
    ax.bar(x + 0.17, p90, width=0.34, label="p90", alpha=0.6)
    ax.axhline(5.0, color="0.4", ls="--", lw=0.8)
    ax.text(len(names) - 0.5, 5.0, " 5%", va="bottom", fontsize=8, color="0.4")
    ax.set_xticks(x, names)
    ax.set_ylabel("relative depth error (%)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.25, axis="y")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_depth_maps(path: str, d_est: np.ndarray, d_truth: np.ndarray,
                    mask: np.ndarray | None = None, title: str = "") -> str:
    """Side-by-side estimated/truth depth images plus a center-row profile."""
    est = np.array(d_est, dtype=float)
    if mask is not None:
        est[~mask] = math.nan
    vmax = float(np.nanmax(d_truth))
    fig, axs = plt.subplots(1, 3, figsize=(11, 3.4), width_ratios=[1, 1, 1.3])
    im = axs[0].imshow(est, vmin=0, vmax=vmax, cmap="viridis")
    axs[0].set_title("estimated", fontsize=9)
    axs[1].imshow(d_truth, vmin=0, vmax=vmax, cmap="viridis")
    axs[1].set_title("truth", fontsize=9)
    for a in axs[:2]:
        a.set_xticks([])
        a.set_yticks([])
    fig.colorbar(im, ax=axs[:2], shrink=0.85, label="depth (m)")
    row = est.shape[0] // 2
    axs[2].plot(d_truth[row], color="0.35", lw=1.0, label="truth")
    axs[2].plot(est[row], lw=1.0, label="estimated")
    axs[2].set_xlabel(f"column (row {row})")
    axs[2].set_ylabel("depth (m)")
    axs[2].legend(fontsize=8)
    axs[2].grid(alpha=0.25)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path

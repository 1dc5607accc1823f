"""Optional figure rendering for CLI outputs. CSV files stay the primary artifact."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def fidelity_curve(curve, path):
    """Success ratio against the (log-scaled) rotation threshold, one line per method."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for m in dict.fromkeys(r["method"] for r in curve):
            pts = [(r["rot_threshold_deg"], r["success_ratio"]) for r in curve if r["method"] == m]
            ax.plot(*zip(*pts), marker="o", ms=3, label=m)
        ax.set_xscale("log")
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("rotation threshold (deg)")
        ax.set_ylabel("success ratio")
        ax.legend(frameon=False)
        return _save(fig, path)


def condition_trend(aggregates, path, title=""):
    """Success ratio per condition (noise level, keep fraction, ...) for each method."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for m in dict.fromkeys(r["method"] for r in aggregates):
            rows = [r for r in aggregates if r["method"] == m]
            ax.plot([r["condition"] or "-" for r in rows], [r["success_ratio"] for r in rows], marker="o", label=m)
        ax.set_ylim(-0.02, 1.02)
        ax.set_ylabel("success ratio")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def method_bars(aggregates, path, title=""):
    """Median rotation error per method (voxel and ICP comparisons)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [r["method"] for r in aggregates]
        ax.bar(range(len(labels)), [r["rot_median"] for r in aggregates], color="0.4")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel("median rotation error (deg)")
        ax.set_title(title)
        return _save(fig, path)


def jacobian_scatter(entries, summary, path):
    """Analytical vs numerical w_z column, one panel per step size."""
    steps = [s["step"] for s in summary]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(steps), figsize=(2.4 * len(steps), 2.6), squeeze=False)
        wz = [e for e in entries if e["twist"] == "w_z"]
        x = [e["analytical"] for e in wz]
        for ax, s in zip(axes[0], summary):
            y = [e[f"numerical_t={s['step']:g}"] for e in wz]
            ax.scatter(x, y, s=4, alpha=0.6)
            ax.set_title(f"t={s['step']:g}  r={s['pearson_w_z']:.2f}")
            ax.set_xlabel("analytical")
        axes[0][0].set_ylabel("numerical")
        return _save(fig, path)


def training_curves(history, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [h.epoch for h in history]
        ax.plot(ep, [h.loss_transform for h in history], label="transform loss")
        ax2 = ax.twinx()
        ax2.plot(ep, [h.success_ratio for h in history], color="C1", label="train success")
        ax.set_xlabel("epoch")
        ax.set_ylabel("transform loss")
        ax2.set_ylabel("success ratio")
        ax.legend(loc="upper left", frameon=False)
        ax2.legend(loc="upper right", frameon=False)
        return _save(fig, path)

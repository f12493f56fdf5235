"""Matplotlib rendering for report outputs.

Every report-producing CLI path writes these figures next to its JSON/CSV
output.  All functions take explicit data and a target path, apply the shared
style, and return the written path.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_adaptation",
    "plot_fit_history",
    "plot_metric_bars",
    "plot_policy_mrt",
    "plot_rtd_curve",
    "plot_trajectory",
]

_STYLE = {
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "legend.frameon": False,
}


def _styled():
    return plt.rc_context(_STYLE)


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_trajectory(trajectory, path, title="Concentration trajectory", events=()):
    """Per-cell concentration traces plus the spatial mean; ``events`` are
    (time, label) markers (cough times, purifier moves)."""
    values = np.asarray(trajectory.values, dtype=float)
    times = np.asarray(trajectory.times())
    with _styled():
        fig, ax = plt.subplots()
        for cell in range(values.shape[1]):
            ax.plot(times, values[:, cell], lw=0.8, alpha=0.45)
        ax.plot(times, values.mean(axis=1), color="black", lw=1.8, label="spatial mean")
        for when, label in events:
            ax.axvline(when, color="crimson", ls="--", lw=0.9, alpha=0.7)
            ax.text(when, ax.get_ylim()[1] * 0.97, f" {label}", rotation=90, va="top", fontsize=8)
        ax.set_xlabel("time [s]")
        ax.set_ylabel("concentration [ug/m^3]")
        ax.set_title(title)
        ax.legend(loc="upper right")
        return _finish(fig, path)


def plot_rtd_curve(f_times, f_values, path, mrt_moment=None, mrt_baseline=None, title="Cumulative residence-time distribution"):
    with _styled():
        fig, ax = plt.subplots()
        ax.plot(f_times, f_values, lw=1.6)
        ax.set_ylim(-0.02, 1.05)
        if mrt_moment is not None:
            ax.axvline(mrt_moment, color="tab:orange", ls="--", lw=1.2, label=f"moment MRT = {mrt_moment:.1f}s")
        if mrt_baseline is not None:
            ax.axvline(mrt_baseline, color="tab:green", ls=":", lw=1.2, label=f"baseline-return MRT = {mrt_baseline:.1f}s")
        ax.set_xlabel("time [s]")
        ax.set_ylabel("F(t)")
        ax.set_title(title)
        if mrt_moment is not None or mrt_baseline is not None:
            ax.legend(loc="lower right")
        return _finish(fig, path)


def plot_fit_history(history, path, title="Fit fitness history"):
    with _styled():
        fig, ax = plt.subplots()
        ax.semilogy(np.arange(len(history)), np.maximum(history, 1e-300), lw=1.4)
        ax.set_xlabel("generation")
        ax.set_ylabel("best MSE [(ug/m^3)^2]")
        ax.set_title(title)
        return _finish(fig, path)


def plot_metric_bars(values_by_entity: dict[str, float], metric: str, path, title=None):
    """One bar per entity (model or policy) for a single metric."""
    names = list(values_by_entity)
    values = [values_by_entity[n] for n in names]
    with _styled():
        fig, ax = plt.subplots()
        bars = ax.bar(np.arange(len(names)), values, color="tab:blue", width=0.6)
        ax.bar_label(bars, fmt="%.1f", fontsize=8)
        ax.set_xticks(np.arange(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel(metric)
        ax.set_title(title or metric)
        return _finish(fig, path)


def plot_policy_mrt(mrts_by_policy: dict[str, list[float]], path, title="Achieved residence time by policy"):
    """Scatter of per-scenario achieved MRTs with the mean marked."""
    names = list(mrts_by_policy)
    with _styled():
        fig, ax = plt.subplots()
        for k, name in enumerate(names):
            ys = np.asarray(mrts_by_policy[name], dtype=float)
            xs = np.full(ys.shape, k, dtype=float) + np.linspace(-0.15, 0.15, len(ys))
            ax.plot(xs, ys, "o", ms=3.5, alpha=0.5)
            ax.plot([k - 0.25, k + 0.25], [ys.mean()] * 2, color="black", lw=2)
        ax.set_xticks(np.arange(len(names)))
        ax.set_xticklabels(names, rotation=15, ha="right")
        ax.set_ylabel("mean residence time [s]")
        ax.set_title(title)
        return _finish(fig, path)


def plot_adaptation(results: dict[str, tuple[float, float]], path, title="Zero-shot vs few-shot adaptation"):
    """Paired bars of 0-shot vs k-shot MRTE per setup shift."""
    names = list(results)
    zero = [results[n][0] for n in names]
    few = [results[n][1] for n in names]
    x = np.arange(len(names))
    with _styled():
        fig, ax = plt.subplots()
        b1 = ax.bar(x - 0.18, zero, width=0.34, label="0-shot")
        b2 = ax.bar(x + 0.18, few, width=0.34, label="2-shot")
        ax.bar_label(b1, fmt="%.0f", fontsize=8)
        ax.bar_label(b2, fmt="%.0f", fontsize=8)
        ax.set_xticks(x)
        ax.set_xticklabels(names)
        ax.set_ylabel("MRTE [s]")
        ax.set_title(title)
        ax.legend()
        return _finish(fig, path)

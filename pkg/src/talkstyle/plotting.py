"""Figure helpers for training curves, pose traces and evaluation reports.

All figures render off-screen and are written without a software-version tag,
so the same data gives byte-identical PNG files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 5.0
colors = ["#08589e", "#d95f02", "#1b9e77", "#7570b3", "#e7298a", "#66a61e"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.family": "sans-serif",
    "font.sans-serif": ["DejaVu Sans"],
    "font.size": 8,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.0,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 100,
    "savefig.dpi": 150,
}

PNG_METADATA = {"Software": None}
AXIS_NAMES = ("pitch", "yaw", "roll")


def _save(fig: plt.Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_losses(curves: Mapping[str, Sequence[float]], path: str | Path, title: str = "") -> Path:
    """One log-scale line per named loss series."""
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for name, values in curves.items():
            v = np.asarray(values, dtype=float)
            if v.size:
                ax.plot(np.arange(1, v.size + 1), v, label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if all(np.all(np.asarray(v) > 0) for v in curves.values() if len(v)):
            ax.set_yscale("log")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_pose_traces(
    generated: np.ndarray, reference: np.ndarray | None, path: str | Path, fps: int = 25
) -> Path:
    """Three stacked panels (pitch, yaw, roll) in degrees."""
    with plt.rc_context(params):
        fig, axes = plt.subplots(3, 1, sharex=True, figsize=(fig_width, fig_width * 0.8))
        t = np.arange(len(generated)) / fps
        for k, ax in enumerate(axes):
            ax.plot(t, np.degrees(generated[:, k]), label="generated")
            if reference is not None:
                tr = np.arange(len(reference)) / fps
                ax.plot(tr, np.degrees(reference[:, k]), label="reference", alpha=0.7)
            ax.set_ylabel(f"{AXIS_NAMES[k]} (deg)")
        axes[-1].set_xlabel("time (s)")
        axes[0].legend(loc="upper right")
        fig.tight_layout()
        return _save(fig, path)


def plot_expression(
    predicted: np.ndarray, reference: np.ndarray, dims: Sequence[int], path: str | Path, fps: int = 25
) -> Path:
    """Predicted against reference trajectories for a few expression dims."""
    with plt.rc_context(params):
        fig, axes = plt.subplots(len(dims), 1, sharex=True, figsize=(fig_width, 1.2 * len(dims) + 0.6))
        axes = np.atleast_1d(axes)
        t = np.arange(len(predicted)) / fps
        for ax, d in zip(axes, dims):
            ax.plot(t, reference[:, d], label="reference", color=colors[1])
            ax.plot(t, predicted[:, d], label="predicted", color=colors[0])
            ax.set_ylabel(f"dim {d}")
        axes[-1].set_xlabel("time (s)")
        axes[0].legend(loc="upper right")
        fig.tight_layout()
        return _save(fig, path)


def plot_metrics(report: Mapping[str, float | None], path: str | Path) -> Path:
    """Horizontal bars for every numeric metric in an evaluation report."""
    items = [(k, v) for k, v in report.items() if isinstance(v, float)]
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(fig_width, 0.35 * len(items) + 0.8))
        names = [k for k, _ in items]
        ax.barh(np.arange(len(items)), [v for _, v in items], color=colors[0])
        ax.set_yticks(np.arange(len(items)), names)
        ax.invert_yaxis()
        ax.set_xlabel("value")
        fig.tight_layout()
        return _save(fig, path)

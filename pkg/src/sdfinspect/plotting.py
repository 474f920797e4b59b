"""Report figures written next to the CSV outputs (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.5,
}


def _save(fig, path):
    # no software/version stamp, so identical runs give identical PNG bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_loss(loss_history, path, title: str = "global field training loss"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.semilogy(np.arange(1, len(loss_history) + 1), loss_history, color="tab:blue")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE")
        ax.set_title(title)
        _save(fig, path)


def plot_coverage_history(history, path):
    """Coverage and trajectory cost of the best leaf against planning time."""
    t = np.array([h["elapsed_s"] for h in history])
    cov = np.array([h["coverage"] for h in history])
    cost = np.array([h["cost"] for h in history])
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.2))
        a.step(t, 100 * cov, where="post", color="tab:red")
        a.set_xlabel("planning time (s)")
        a.set_ylabel("coverage (%)")
        b.step(t, cost, where="post", color="tab:blue")
        b.set_xlabel("planning time (s)")
        b.set_ylabel("trajectory cost (m)")
        _save(fig, path)


def plot_topdown(covered, uncovered, path_xyz, out_path, title: str = "inspection path (top view)"):
    """Red covered and black uncovered surface points, blue path, projected on xy."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 5))
        if len(uncovered):
            ax.scatter(uncovered[:, 0], uncovered[:, 1], s=0.5, c="black", alpha=0.3, label="uncovered")
        if len(covered):
            ax.scatter(covered[:, 0], covered[:, 1], s=0.5, c="red", alpha=0.5, label="covered")
        p = np.atleast_2d(path_xyz)
        ax.plot(p[:, 0], p[:, 1], "-o", color="tab:blue", ms=3, label="path")
        ax.plot(p[:1, 0], p[:1, 1], "s", color="tab:blue", ms=7)
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.set_title(title)
        ax.legend(loc="upper right", markerscale=6, fontsize=8)
        _save(fig, out_path)

"""Aligned estimate / ground-truth pairs for plotting, as CSV and a top-down figure."""
from __future__ import annotations

import csv

import numpy as np

from .metrics import ASSOCIATION_TOLERANCE, associate, align_rigid
from .trajectory import Trajectory

PLOT_COLUMNS = ["timestamp", "est_x", "est_y", "est_z", "gt_x", "gt_y", "gt_z", "error"]


def aligned_pairs(estimate: Trajectory, truth: Trajectory, align: bool = True,
                  tolerance: float = ASSOCIATION_TOLERANCE) -> np.ndarray:
    """Rows of (timestamp, estimate xyz, truth xyz, translation error).

    With ``align`` the estimate is first moved onto the truth by the same rigid
    fit used for the absolute error, so the last column squared and averaged
    gives t_abs squared.
    """
    ia, ib = associate(estimate.stamps, truth.stamps, tolerance)
    if len(ia) == 0:
        raise ValueError("no associable timestamp pairs")
    p_est = estimate.positions[ia]
    p_gt = truth.positions[ib]
    if align:
        p_est = align_rigid(p_est, p_gt).apply(p_est)
    err = np.linalg.norm(p_est - p_gt, axis=1)
    return np.column_stack([truth.stamps[ib], p_est, p_gt, err])


def write_plot_csv(rows: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLOT_COLUMNS)
        for r in rows:
            w.writerow(["%.17g" % v for v in r])


def render_topdown(rows: np.ndarray, path, title: str | None = None) -> None:
    """Ground-plane (x, z) view of both trajectories, colored by error."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6), dpi=100)
    ax.plot(rows[:, 4], rows[:, 6], color="0.3", lw=1.0, ls="--", label="ground truth")
    sc = ax.scatter(rows[:, 1], rows[:, 3], c=rows[:, 7], s=6, cmap="viridis", label="estimate")
    fig.colorbar(sc, ax=ax, label="translation error [m]")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)

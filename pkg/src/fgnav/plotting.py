"""Static SVG figures: map, trajectories and control traces."""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.transforms import Affine2D  # noqa: E402

from .distance import OCCUPIED, UNKNOWN, GridMap  # noqa: E402


def draw_map(ax, grid: GridMap):
    img = np.ones(grid.cells.shape)
    img[grid.cells == UNKNOWN] = 0.75
    img[grid.cells == OCCUPIED] = 0.0
    o = grid.origin
    tr = Affine2D().rotate(o.theta).translate(o.x, o.y) + ax.transData
    h, w = grid.cells.shape
    ax.imshow(img, cmap="gray", vmin=0, vmax=1, origin="lower", interpolation="nearest",
              extent=(0, w * grid.resolution, 0, h * grid.resolution), transform=tr)
    corners = o.transform_points(np.array([[0, 0], [w, 0], [w, h], [0, h]]) * grid.resolution)
    ax.set_xlim(corners[:, 0].min(), corners[:, 0].max())
    ax.set_ylim(corners[:, 1].min(), corners[:, 1].max())
    ax.set_aspect("equal")


def _save(fig, path: str):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_mpc(path: str, grid: GridMap, states: np.ndarray, controls: np.ndarray,
             initial_states: Optional[np.ndarray] = None, reference: Optional[np.ndarray] = None,
             obstacle_points: Optional[np.ndarray] = None, T_s: float = 0.1):
    """Map with the initial guess and optimized horizon, plus v and w over time."""
    fig, (ax, ax_u) = plt.subplots(1, 2, figsize=(11, 4.5), gridspec_kw={"width_ratios": [1.4, 1]})
    draw_map(ax, grid)
    if obstacle_points is not None and len(obstacle_points):
        ax.plot(obstacle_points[:, 0], obstacle_points[:, 1], ".", color="tab:red", ms=2,
                label="unmapped obstacle")
    if reference is not None:
        ax.plot(reference[:, 0], reference[:, 1], ":", color="tab:gray", label="reference")
    if initial_states is not None:
        ax.plot(initial_states[:, 0], initial_states[:, 1], "--", color="tab:orange",
                label="initial guess")
    ax.plot(states[:, 0], states[:, 1], "-o", color="tab:blue", ms=3, label="optimized")
    pad = 1.0
    allx = np.concatenate([states[:, 0]] + ([] if initial_states is None else [initial_states[:, 0]]))
    ally = np.concatenate([states[:, 1]] + ([] if initial_states is None else [initial_states[:, 1]]))
    ax.set_xlim(allx.min() - pad, allx.max() + pad)
    ax.set_ylim(ally.min() - pad, ally.max() + pad)
    ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    t = T_s * np.arange(len(controls))
    ax_u.step(t, controls[:, 0], where="post", label="v [m/s]")
    ax_u.step(t, controls[:, 1], where="post", label="w [rad/s]")
    ax_u.axhline(0.0, color="k", lw=0.5)
    ax_u.set_xlabel("t [s]")
    ax_u.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_run(path: str, grid: GridMap, run, obstacle_points: Optional[np.ndarray] = None,
             goals: Optional[Sequence] = None):
    """Ground truth and estimated trajectories of a run, plus its control trace."""
    fig, (ax, ax_u) = plt.subplots(1, 2, figsize=(12, 4.5), gridspec_kw={"width_ratios": [1.4, 1]})
    draw_map(ax, grid)
    if obstacle_points is not None and len(obstacle_points):
        ax.plot(obstacle_points[:, 0], obstacle_points[:, 1], ".", color="tab:red", ms=2)
    gt, est = run.gt_trajectory, run.est_trajectory
    ax.plot(gt[:, 1], gt[:, 2], "-", color="tab:green", label="ground truth")
    ax.plot(est[:, 1], est[:, 2], "--", color="tab:blue", label="estimate")
    goals = run.goals if goals is None else goals
    if goals:
        g = np.array([[p[0], p[1]] for p in goals])
        ax.plot(g[:, 0], g[:, 1], "x", color="tab:red", ms=8, label="goals")
    ax.legend(loc="best", fontsize=8)
    c = run.controls
    ax_u.plot(c[:, 0], c[:, 1], label="v [m/s]")
    ax_u.plot(c[:, 0], c[:, 2], label="w [rad/s]")
    ax_u.set_xlabel("t [s]")
    ax_u.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)

"""Static figure rendering: per-sample BEV and FPV panels with the score
heatmap (pink dots, darker = higher probability), observed/ground-truth/
predicted trajectories and sampled goals as stars.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import project_to_fpv
from .scene import KIND_LANE, Sample


def _heat_colors(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    rng = s.max() - s.min()
    norm = (s - s.min()) / rng if rng > 0 else np.zeros_like(s)
    cmap = plt.get_cmap("RdPu")
    return cmap(0.15 + 0.85 * norm)


def plot_bev(ax, sample: Sample, prediction: dict | None = None):
    for inst in sample.instances:
        xy = inst.polyline[:, :2]
        if inst.kind == KIND_LANE:
            ax.plot(xy[:, 0], xy[:, 1], color="0.7", lw=1.0, zorder=1)
        else:
            color = "tab:blue" if inst.id == sample.target_id else "0.4"
            ax.plot(xy[:, 0], xy[:, 1], color=color, lw=1.5, zorder=3)
    fut = sample.future_bev
    ax.plot(fut[:, 0], fut[:, 1], color="tab:green", lw=1.5, zorder=4, label="ground truth")

    if prediction is not None:
        heat = prediction.get("heatmap")
        if heat:
            pts = np.asarray(heat["candidates"], dtype=float)
            ax.scatter(pts[:, 0], pts[:, 1], s=6, c=_heat_colors(heat["scores"]), zorder=2)
        for traj in prediction.get("bev", []):
            t = np.asarray(traj, dtype=float)
            ax.plot(t[:, 0], t[:, 1], color="tab:orange", lw=1.0, zorder=5)
        goal_pts = prediction.get("goal_points")
        if goal_pts:
            g = np.asarray(goal_pts, dtype=float)
            ax.scatter(g[:, 0], g[:, 1], marker="*", s=120, color="gold",
                       edgecolor="k", zorder=6, label="goals")
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title("BEV")


def plot_fpv(ax, sample: Sample, prediction: dict | None = None):
    cam = sample.camera
    for inst in sample.instances:
        pts = inst.polyline.copy()
        if inst.kind != KIND_LANE:
            pts[:, 2] = 0.0
        uv, vis = project_to_fpv(pts, cam)
        for j in range(len(uv) - 1):
            if vis[j] and vis[j + 1]:
                color = "0.7" if inst.kind == KIND_LANE else (
                    "tab:blue" if inst.id == sample.target_id else "0.4"
                )
                ax.plot(uv[j : j + 2, 0], uv[j : j + 2, 1], color=color, lw=1.0)
    uv, vis = sample.future_fpv()
    if vis.any():
        ax.plot(uv[vis, 0], uv[vis, 1], color="tab:green", lw=1.5)

    if prediction is not None:
        heat = prediction.get("heatmap")
        if heat:
            pts = np.asarray(heat["candidates"], dtype=float)
            cuv, cvis = project_to_fpv(pts, cam)
            colors = _heat_colors(heat["scores"])
            ax.scatter(cuv[cvis, 0], cuv[cvis, 1], s=6, c=colors[cvis], zorder=2)
        for traj in prediction.get("fpv", []):
            if traj is None:
                continue
            t = np.asarray(traj, dtype=float)
            ax.plot(t[:, 0], t[:, 1], color="tab:orange", lw=1.0, zorder=5)
        goal_pts = prediction.get("goal_points")
        if goal_pts:
            guv, gvis = project_to_fpv(np.asarray(goal_pts, dtype=float), cam)
            ax.scatter(guv[gvis, 0], guv[gvis, 1], marker="*", s=120,
                       color="gold", edgecolor="k", zorder=6)
    ax.set_xlim(0, cam.image_width)
    ax.set_ylim(cam.image_height, 0)  # image convention: v grows downward
    ax.set_xlabel("u (px)")
    ax.set_ylabel("v (px)")
    ax.set_title("FPV")


def render_sample(sample: Sample, prediction: dict | None, bev_path, fpv_path):
    for plot_fn, path in ((plot_bev, bev_path), (plot_fpv, fpv_path)):
        fig, ax = plt.subplots(figsize=(6, 5))
        plot_fn(ax, sample, prediction)
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)

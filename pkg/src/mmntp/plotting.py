"""Static figure rendering: scenes, multimodal predictions, contingency plans,
and per-horizon metric curves.

Figures are written as vector graphics with pinned hash salts and no embedded
dates, so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Rectangle

from .metrics import MetricsReport
from .model import ModePrediction
from .planner import ContingencyPlan
from .scene import Scene

MODE_COLORS = ("#d95f02", "#1b9e77", "#7570b3", "#e7298a", "#66a61e", "#e6ab02")

matplotlib.rcParams["svg.hashsalt"] = "mmntp"


def _metadata(fmt: str, description: dict | None):
    desc = json.dumps(description, sort_keys=True) if description else None
    if fmt == "svg":
        meta = {"Date": None}
        if desc:
            meta["Description"] = desc
        return meta
    meta = {"CreationDate": None}
    if desc:
        meta["Subject"] = desc
    return meta


def save_figure(fig, path, description: dict | None = None) -> None:
    fmt = str(path).rsplit(".", 1)[-1].lower()
    fig.savefig(path, format=fmt, metadata=_metadata(fmt, description),
                bbox_inches="tight")
    plt.close(fig)


def draw_scene(ax, scene: Scene, frame: int, highlight_id: int | None = None) -> None:
    """Road markings plus vehicle bounding boxes at one frame."""
    geo = scene.geometry
    xs = []
    for vid in scene.ids_present_at(frame):
        sv = scene.state_of(vid, frame)
        xs.append(sv.position[0])
        color = "#08519c" if vid == highlight_id else "#999999"
        ax.add_patch(Rectangle(
            (sv.position[0] - sv.length / 2, sv.position[1] - sv.width / 2),
            sv.length, sv.width, facecolor=color, edgecolor="black", linewidth=0.5,
            zorder=3,
        ))
        ax.annotate(str(vid), sv.position, fontsize=6, ha="center", va="center",
                    color="white", zorder=4)
    lo = min(xs) - 30 if xs else 0.0
    hi = max(xs) + 60 if xs else 100.0
    for i, lat in enumerate(geo.marking_lats):
        style = "-" if i in (0, len(geo.marking_lats) - 1) else "--"
        ax.plot([lo, hi], [lat, lat], style, color="#444444", linewidth=0.8, zorder=1)
    ax.set_xlim(lo, hi)
    ax.set_ylim(geo.road_bounds[0] - 2, geo.road_bounds[1] + 2)
    ax.set_xlabel("longitudinal position [m]")
    ax.set_ylabel("lateral position [m]")
    ax.set_aspect("auto")


def draw_modes(ax, anchor, modes: list[ModePrediction], gt_traj: np.ndarray | None = None) -> None:
    """Dashed mean trajectory per mode, labelled with its probability."""
    anchor = np.asarray(anchor, dtype=float)
    for i, mode in enumerate(modes):
        traj = anchor + mode.mean_traj
        color = MODE_COLORS[i % len(MODE_COLORS)]
        ax.plot(traj[:, 0], traj[:, 1], "--", color=color, linewidth=1.4,
                label=f"mode {i + 1} (p={mode.prob:.2f})", zorder=5)
    if gt_traj is not None:
        gt = anchor + np.asarray(gt_traj)
        ax.plot(gt[:, 0], gt[:, 1], "-", color="black", linewidth=1.2,
                label="ground truth", zorder=5)
    ax.legend(fontsize=7, loc="upper left")


def draw_plan(ax, plan: ContingencyPlan) -> None:
    """Solid planned ego trajectory per branch, colour-matched to the modes."""
    for i, branch in enumerate(plan.branches):
        color = MODE_COLORS[i % len(MODE_COLORS)]
        ax.plot(branch.states[:, 0], branch.states[:, 1], "-", color=color,
                linewidth=1.8, zorder=6)
        if plan.problem is not None:
            tv = plan.problem.tv_trajs[i]
            ax.plot(tv[:, 0], tv[:, 1], "--", color=color, linewidth=1.2, zorder=5)
    ax.plot(plan.branches[0].states[0, 0], plan.branches[0].states[0, 1],
            "o", color="#08519c", markersize=5, zorder=7)


def render_scene_figure(path, scene: Scene, frame: int, description: dict | None = None) -> None:
    fig, ax = plt.subplots(figsize=(9, 3))
    draw_scene(ax, scene, frame)
    ax.set_title(f"scene at frame {frame}")
    save_figure(fig, path, description)


def render_prediction_figure(
    path, scene: Scene, frame: int, tv_id: int,
    modes: list[ModePrediction], gt_traj: np.ndarray | None = None,
    description: dict | None = None,
) -> None:
    fig, ax = plt.subplots(figsize=(9, 3))
    draw_scene(ax, scene, frame, highlight_id=tv_id)
    anchor = scene.state_of(tv_id, frame).position
    draw_modes(ax, anchor, modes, gt_traj)
    ax.set_title(f"multimodal prediction for vehicle {tv_id} at frame {frame}")
    save_figure(fig, path, description)


def render_plan_figure(
    path, plan: ContingencyPlan, scene: Scene | None = None, frame: int = 0,
    description: dict | None = None,
) -> None:
    fig, ax = plt.subplots(figsize=(9, 3))
    if scene is not None:
        draw_scene(ax, scene, frame)
    draw_plan(ax, plan)
    ax.set_title("contingency plan (solid: ego branches, dashed: TV modes)")
    save_figure(fig, path, description)


def render_metric_curves(path, report: MetricsReport, description: dict | None = None) -> None:
    """Per-horizon error curves, one line per K."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for i, k in enumerate(report.ks):
        ax.plot(report.horizons_s, report.min_rmse[k], "o-",
                color=MODE_COLORS[i % len(MODE_COLORS)], label=f"minRMSE-{k}")
    ax.set_xlabel("prediction horizon [s]")
    ax.set_ylabel("RMSE [m]")
    ax.set_xticks(report.horizons_s)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    save_figure(fig, path, description)

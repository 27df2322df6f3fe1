"""Per-stage marker trajectory/acceleration traces as CSVs and figures."""
import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import metrics as mt

AXES = ("x", "y", "z")


def _trace(markers, fps, marker_index, kind):
    track = np.asarray(markers, dtype=np.float64)[:, marker_index]
    if kind == "trajectory":
        return track
    if kind == "acceleration":
        return mt.accelerations(track, fps)
    raise ValueError(f"unknown trace kind {kind!r}")


def write_trace_csv(path, markers, fps, marker_index, kind):
    rows = _trace(markers, fps, marker_index, kind)
    head = AXES if kind == "trajectory" else tuple("a" + a for a in AXES)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("frame",) + head)
        for t, row in enumerate(rows):
            writer.writerow([t] + [repr(float(v)) for v in row])
    return path


def write_stage_traces(out_dir, stage_markers, fps, marker_index,
                       stem="marker"):
    """One trajectory CSV + one acceleration CSV per stage.

    stage_markers: mapping of stage name -> (T, M, 3) marker tracks.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for stage in sorted(stage_markers):
        for kind in ("trajectory", "acceleration"):
            path = os.path.join(out_dir, f"{stem}_{stage}_{kind}.csv")
            paths.append(write_trace_csv(path, stage_markers[stage], fps,
                                         marker_index, kind))
    return paths


def render_stage_figures(out_dir, stage_markers, fps, marker_index,
                         stem="marker"):
    """Matplotlib mirrors of the trace CSVs: one figure per trace kind,
    three stacked axes (x/y/z), one line per stage."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for kind in ("trajectory", "acceleration"):
        fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
        for stage in sorted(stage_markers):
            rows = _trace(stage_markers[stage], fps, marker_index, kind)
            for k in range(3):
                axes[k].plot(rows[:, k], label=stage, linewidth=1.0)
        for k in range(3):
            unit = "m" if kind == "trajectory" else "m/s^2"
            axes[k].set_ylabel(f"{AXES[k]} [{unit}]")
            axes[k].grid(True, alpha=0.3)
        axes[0].legend(loc="upper right", fontsize=8)
        axes[-1].set_xlabel("frame")
        fig.suptitle(f"marker {kind} per stage")
        path = os.path.join(out_dir, f"{stem}_{kind}.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths


def render_loss_curve(path, losses, title="training loss"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.asarray(losses, dtype=np.float64), linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path

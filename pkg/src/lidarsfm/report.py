"""Figures rendered from a metrics CSV."""
from __future__ import annotations

import csv
import os

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "figsize": (6.4, 3.6),
    "dpi": 120,
}
COLORS = {"total": "#6a3d9a", "projected": "#e6ab02", "nn": "#1b9e77", "before": "#999999", "after": "#d95f02"}


def _rows(path, mode="incremental"):
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if mode is None or r["mode"] == mode]
    return rows


def _col(rows, key, cast=float):
    return np.array([cast(r[key]) for r in rows])


def _new():
    fig = Figure(figsize=STYLE["figsize"], dpi=STYLE["dpi"], layout="tight")
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(111)


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    return path


def plot_plane_counts(rows, path):
    fig, ax = _new()
    idx = _col(rows, "registration_index", int)
    ax.plot(idx, _col(rows, "n_planes"), color=COLORS["total"], label="total")
    ax.plot(idx, _col(rows, "n_projected"), color=COLORS["projected"], label="projected")
    ax.plot(idx, _col(rows, "n_nn"), color=COLORS["nn"], label="nearest neighbour")
    ax.set_xlabel("registered images")
    ax.set_ylabel("plane factors")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_point_to_plane(rows, path):
    fig, ax = _new()
    idx = _col(rows, "registration_index", int)
    ax.plot(idx, _col(rows, "p2p_mean_before"), color=COLORS["before"], label="before BA")
    ax.plot(idx, _col(rows, "p2p_mean_after"), color=COLORS["after"], label="after BA")
    ax.set_xlabel("registered images")
    ax.set_ylabel("mean point-to-plane distance (m)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_reprojection(rows, path):
    fig, ax = _new()
    idx = _col(rows, "registration_index", int)
    mean = _col(rows, "reproj_mean_px")
    std = np.sqrt(np.maximum(_col(rows, "reproj_var_px"), 0.0))
    ax.fill_between(idx, mean - std, mean + std, color=COLORS["after"], alpha=0.2, lw=0)
    ax.plot(idx, mean, color=COLORS["after"])
    ax.set_xlabel("registered images")
    ax.set_ylabel("reprojection error (px)")
    ax.set_ylim(bottom=0)
    return _save(fig, path)


def render_figures(metrics_path, out_dir):
    """Write plane-count, point-to-plane and reprojection figures as PNG.

    Only incremental BA rows are plotted. Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = _rows(metrics_path)
    if not rows:
        return []
    return [
        plot_plane_counts(rows, os.path.join(out_dir, "plane_counts.png")),
        plot_point_to_plane(rows, os.path.join(out_dir, "point_to_plane.png")),
        plot_reprojection(rows, os.path.join(out_dir, "reprojection.png")),
    ]

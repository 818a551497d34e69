"""Figure rendering for experiment and training outputs.

Each renderer takes a result CSV produced by the CLI and writes a PNG
next to it (or to an explicit path). Figures mirror the quantities the
verdicts are computed from; the CSV stays the canonical record.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .datagen import POSE_FORCE_NAMES


def _load_csv(path):
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    return header, rows


def _col(header, rows, name):
    return rows[:, header.index(name)]


def render_exp1(csv_path, out_path=None) -> Path:
    header, rows = _load_csv(csv_path)
    out = Path(out_path) if out_path else Path(csv_path).with_suffix(".png")
    t = _col(header, rows, "t")
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(8, 6))
    ax1.plot(t, _col(header, rows, "Fz_sum"), label="grasp force (N)")
    ax1.axhline(9.0, color="tab:red", ls="--", lw=0.8, label="crush limit")
    ax1b = ax1.twinx()
    ax1b.plot(t, _col(header, rows, "u"), color="tab:orange", lw=0.9, label="hand command u")
    ax1b.set_ylabel("u")
    ax1.set_ylabel("F (N)")
    ax1.legend(loc="upper left", fontsize=8)
    ax2.plot(t, _col(header, rows, "dFy"), lw=0.8)
    for band in (0.05, -0.05, 0.25, -0.25):
        ax2.axhline(band, color="gray", ls=":", lw=0.6)
    ax2.set_ylabel("shear-rate error")
    ax2.set_xlabel("t (s)")
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def render_exp2(csv_path, out_path=None) -> Path:
    header, rows = _load_csv(csv_path)
    out = Path(out_path) if out_path else Path(csv_path).with_suffix(".png")
    t = _col(header, rows, "t")
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(8, 8))
    axes[0].plot(t, _col(header, rows, "theta_x"), label="theta_x")
    axes[0].plot(t, _col(header, rows, "theta_y"), label="theta_y")
    axes[0].set_ylabel("deg")
    axes[0].legend(fontsize=8)
    axes[1].plot(t, _col(header, rows, "dFx"), lw=0.7, label="dFx")
    axes[1].plot(t, _col(header, rows, "dFy"), lw=0.7, label="dFy")
    axes[1].plot(t, _col(header, rows, "ux"), lw=0.7, ls="--", label="ux")
    axes[1].plot(t, _col(header, rows, "uy"), lw=0.7, ls="--", label="uy")
    axes[1].set_ylabel("controller inputs")
    axes[1].legend(fontsize=8, ncol=2)
    axes[2].plot(t, _col(header, rows, "Fz_sum"), label="grasp force (N)")
    ax2b = axes[2].twinx()
    ax2b.plot(t, 1e3 * _col(header, rows, "rice_mass"), color="tab:green", lw=0.9)
    ax2b.set_ylabel("rice (g)")
    axes[2].set_ylabel("F (N)")
    axes[2].set_xlabel("t (s)")
    axes[2].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def render_exp3(csv_path, out_path=None) -> Path:
    header, rows = _load_csv(csv_path)
    out = Path(out_path) if out_path else Path(csv_path).with_suffix(".png")
    t = _col(header, rows, "t")
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(8, 8))
    for axis, color in zip("xyz", ("tab:blue", "tab:orange", "tab:green")):
        axes[0].plot(t, _col(header, rows, f"fpred_{axis}"), color=color, lw=0.8,
                     label=f"predicted F{axis}")
        axes[0].plot(t, _col(header, rows, f"ftrue_{axis}"), color=color, lw=0.8, ls="--")
        axes[1].plot(t, _col(header, rows, f"v{axis}"), color=color, lw=0.8)
        axes[2].plot(t, _col(header, rows, axis), color=color, lw=0.9)
    axes[0].set_ylabel("force (N); dashed = truth")
    axes[0].legend(fontsize=8)
    axes[1].set_ylabel("velocity (mm/s)")
    axes[2].set_ylabel("displacement (mm)")
    axes[2].set_xlabel("t (s)")
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def render_mae_report(csv_path, out_path=None) -> Path:
    """Grouped bars: per-output MAE of each strategy, one dot per sensor."""
    out = Path(out_path) if out_path else Path(csv_path).with_suffix(".png")
    with Path(csv_path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        records = list(reader)
    strategies = sorted({r["strategy"] for r in records})
    fig, axes = plt.subplots(2, 3, figsize=(11, 6))
    for d, name in enumerate(POSE_FORCE_NAMES):
        ax = axes[d // 3][d % 3]
        for i, strat in enumerate(strategies):
            vals = [float(r["mae"]) for r in records
                    if r["strategy"] == strat and r["output"] == name]
            ax.scatter([i] * len(vals), vals, s=12)
            if vals:
                ax.hlines(np.mean(vals), i - 0.3, i + 0.3, color="k", lw=1.2)
        ax.set_title(name, fontsize=9)
        ax.set_xticks(range(len(strategies)))
        ax.set_xticklabels([s.replace("_", "\n") for s in strategies], fontsize=7)
    fig.suptitle("test MAE per output (dots: sensors, bar: mean)")
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def render_scatter(csv_path, out_path=None, max_points: int = 2000) -> Path:
    """Predicted-vs-label scatter, one panel per output."""
    out = Path(out_path) if out_path else Path(csv_path).with_suffix(".png")
    with Path(csv_path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        records = list(reader)
    fig, axes = plt.subplots(2, 3, figsize=(11, 6))
    for d, name in enumerate(POSE_FORCE_NAMES):
        ax = axes[d // 3][d % 3]
        pts = [(float(r["label"]), float(r["prediction"]))
               for r in records if r["output"] == name]
        pts = pts[:max_points]
        if pts:
            labels, preds = zip(*pts)
            ax.scatter(labels, preds, s=3, alpha=0.4)
            lo, hi = min(labels), max(labels)
            ax.plot([lo, hi], [lo, hi], color="k", lw=0.8)
        ax.set_title(name, fontsize=9)
    fig.suptitle("prediction vs label")
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


RENDERERS = {
    "exp1": render_exp1,
    "exp2": render_exp2,
    "exp3": render_exp3,
    "mae_report": render_mae_report,
    "scatter": render_scatter,
}


def render_auto(csv_path, out_path=None) -> Path:
    """Pick a renderer from the CSV header/filename."""
    name = Path(csv_path).name
    header, _ = None, None
    with Path(csv_path).open("r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if "strategy" in header and "mae" in header:
        return render_mae_report(csv_path, out_path)
    if "prediction" in header:
        return render_scatter(csv_path, out_path)
    if "rice_mass" in header:
        return render_exp2(csv_path, out_path)
    if "fpred_x" in header:
        return render_exp3(csv_path, out_path)
    if "dFy" in header:
        return render_exp1(csv_path, out_path)
    raise ValueError(f"{name}: no renderer recognizes this CSV")

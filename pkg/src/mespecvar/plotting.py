"""Matplotlib figures for heatmaps and the consistency study.

Figures are written with fixed metadata and a fixed SVG hash salt so
repeated runs produce identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "svg.hashsalt": "mespecvar",
    "svg.fonttype": "path",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".").lower() or "svg"
    meta = {"Date": None} if fmt in ("svg", "pdf") else {"Software": None}
    if fmt == "svg":
        meta["Creator"] = None
    fig.savefig(path, format=fmt, metadata=meta)
    plt.close(fig)
    return path


def plot_heatmaps(maps, path, cmap: str = "Greys") -> Path:
    """Group 1 / group 2 random-effect SDs and their absolute difference."""
    names = list(maps.channel_names)
    panels = [(f"group {g}", m) for g, m in maps.tau.items()]
    panels.append(("|difference|", maps.difference))
    vmax = max(float(np.max(m)) for _, m in panels) or 1.0
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.2),
                                 constrained_layout=True)
        for ax, (title, m) in zip(np.atleast_1d(axes), panels):
            im = ax.imshow(m, cmap=cmap, vmin=0.0, vmax=vmax)
            ax.set_title(f"{maps.band}: {title}")
            ax.set_xticks(range(len(names)), names, rotation=90)
            ax.set_yticks(range(len(names)), names)
            ax.set_xlabel("source")
            ax.set_ylabel("target")
        fig.colorbar(im, ax=axes, shrink=0.8, label="random-effect SD")
        return _save(fig, path)


def plot_simulation_trends(report, path) -> Path:
    """Mean bias/MSE/SD of the fixed effects and random SDs against T."""
    T = [r.n_samples for r in report.regimes]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.0), constrained_layout=True)
        for ax, which, title in zip(axes, ("phi", "tau"),
                                    ("fixed effects (lag 1)", "random-effect SDs")):
            trend = report.trend(which)
            for key, label, marker in (("mean_abs_bias", "|bias|", "o"),
                                       ("mean_mse", "MSE", "s"),
                                       ("mean_sd", "SD", "^")):
                ax.plot(T, trend[key], marker=marker, label=label)
            ax.set_yscale("log")
            ax.set_xlabel("time points per subject")
            ax.set_title(title)
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_error_matrices(report, path, which: str = "phi") -> Path:
    """Entrywise MSE matrix per regime."""
    mats = [getattr(r, which).mse for r in report.regimes]
    vmax = max(float(m.max()) for m in mats) or 1.0
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(mats), figsize=(3.0 * len(mats), 3.0),
                                 constrained_layout=True)
        for ax, r, m in zip(np.atleast_1d(axes), report.regimes, mats):
            im = ax.imshow(m, cmap="viridis", vmin=0.0, vmax=vmax)
            ax.set_title(f"MSE, T = {r.n_samples}")
        fig.colorbar(im, ax=axes, shrink=0.8)
        return _save(fig, path)

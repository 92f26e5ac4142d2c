"""Render accuracy curves from run records to image files.

Used by the report command so every delimited export ships with figures:
one overall accuracy-versus-sparsity plot and a per-question-type panel,
mean lines with shaded one-standard-deviation bands per recipe.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .report import curves_bundle

plt.rcParams.update({
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 7,
    "lines.markersize": 4,
})

TYPE_LABELS = {"yn": "Y/N", "num": "Num", "other": "Other"}


def _plot_metric(ax, curves, split, metric, title):
    for recipe in sorted(curves):
        series = curves[recipe].get(split, {}).get(metric)
        if not series:
            continue
        xs = [p["sparsity"] for p in series]
        means = [p["mean"] for p in series]
        stds = [p["std"] for p in series]
        if len(xs) == 1:
            ax.errorbar(xs, means, yerr=stds, fmt="o", label=recipe, capsize=3)
        else:
            ax.plot(xs, means, marker="o", label=recipe)
            ax.fill_between(xs, [m - s for m, s in zip(means, stds)],
                            [m + s for m, s in zip(means, stds)], alpha=0.2)
    ax.set_xlabel("overall sparsity")
    ax.set_ylabel("accuracy")
    ax.set_title(title)


def render_figures(records, out_dir, split: str = "test", basename: str = "results"):
    """Write the overall plot and the per-type panel; returns file paths."""
    os.makedirs(out_dir, exist_ok=True)
    curves = curves_bundle(records)["curves"]
    paths = []

    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    _plot_metric(ax, curves, split, "overall", f"{split} accuracy")
    ax.legend(loc="best")
    fig.tight_layout()
    path = os.path.join(out_dir, f"{basename}_overall.png")
    fig.savefig(path)
    plt.close(fig)
    paths.append(path)

    present = [t for t in ("yn", "num", "other")
               if any(t in node.get(split, {}) for node in curves.values())]
    if present:
        fig, axes = plt.subplots(1, len(present),
                                 figsize=(3.4 * len(present), 3.2),
                                 squeeze=False)
        for ax, qtype in zip(axes[0], present):
            _plot_metric(ax, curves, split, qtype, TYPE_LABELS[qtype])
        axes[0][0].legend(loc="best")
        fig.tight_layout()
        path = os.path.join(out_dir, f"{basename}_per_type.png")
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths

"""Static report figures (PNG, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .volume import Atlas  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def _bars(ax, deltas: dict, title: str) -> None:
    keys = list(deltas)
    vals = [0.0 if deltas[k] is None else deltas[k] for k in keys]
    colors = ["tab:blue" if v >= 0 else "tab:red" for v in vals]
    ax.bar(range(len(keys)), vals, color=colors)
    for i, k in enumerate(keys):
        if deltas[k] is None:
            ax.text(i, 0, "n/a", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(keys)), keys, rotation=30, ha="right", fontsize=8)
    ax.axhline(0, color="black", lw=0.8)
    ax.set_title(title, fontsize=10)
    ax.set_ylim(-1.05, 1.05)


def delta_figure(delta: dict, path: str | Path) -> Path:
    """Biased-minus-baseline bars for class F1, group accuracy and cell accuracy."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6))
    _bars(axes[0], delta["f1"], "F1 per class")
    _bars(axes[1], delta["group_accuracy"], "accuracy per group")
    _bars(axes[2], delta["cell_accuracy"], "accuracy per cell")
    axes[0].set_ylabel("biased - baseline")
    fig.suptitle("positive/negative Δ indicates an increase/drop", fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def rank_figure(ranks: dict):
    """B against P with region labels; annotates degenerate correlations."""
    b, p = np.asarray(ranks["B"]), np.asarray(ranks["P"])
    fig, ax = plt.subplots(figsize=(4.8, 4.4))
    top = set(ranks["top_regions"])
    for rid, x, y in zip(ranks["region_ids"], b, p):
        ax.scatter(x, y, color="tab:red" if rid in top else "tab:gray", s=28)
        ax.annotate(str(rid), (x, y), textcoords="offset points", xytext=(3, 3), fontsize=7)
    ax.axhline(0, color="black", lw=0.6)
    ax.axvline(0, color="black", lw=0.6)
    ax.set_xlabel("B = r_BI - r_BA")
    ax.set_ylabel("P = r_PA - r_BA")
    if ranks["rho"] is None:
        ax.set_title("undefined correlation", fontsize=10)
        ax.text(0.5, 0.5, "undefined correlation", transform=ax.transAxes, ha="center", color="tab:red")
    else:
        ax.set_title(f"rho = {ranks['rho']:.3f}, p_perm = {ranks['p_perm']:.3f}", fontsize=10)
    fig.tight_layout()
    return fig


def rank_scatter(ranks: dict, path: str | Path) -> Path:
    return _save(rank_figure(ranks), path)


def region_overlay(atlas: Atlas, regions: list[int], path: str | Path) -> Path:
    """Top regions drawn over the three central orthogonal atlas slices."""
    labels = atlas.labels
    centre = [n // 2 for n in labels.shape]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    cmap = plt.get_cmap("tab10")
    for ax, axis in zip(axes, range(3)):
        sl = np.take(labels, centre[axis], axis=axis)
        ax.imshow(sl.T > 0, cmap="gray", origin="lower", vmin=0, vmax=2)
        overlay = np.zeros(sl.shape + (4,))
        for k, rid in enumerate(regions):
            overlay[sl == rid] = cmap(k % 10)
        ax.imshow(np.transpose(overlay, (1, 0, 2)), origin="lower")
        ax.set_axis_off()
        ax.set_title(f"axis {axis}, slice {centre[axis]}", fontsize=9)
    handles = [plt.Rectangle((0, 0), 1, 1, color=cmap(k % 10)) for k in range(len(regions))]
    fig.legend(handles, [atlas.region_names.get(r, str(r)) for r in regions], loc="lower center",
               ncol=max(len(regions), 1), fontsize=8)
    fig.suptitle(f"top-{len(regions)} regions (shortcut features)", fontsize=10)
    return _save(fig, path)


def stability_figure(curves: dict, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    for name, pts in curves.items():
        ax.plot([q["radius"] for q in pts], [q["stability"] for q in pts], marker="o", label=name)
    ax.set_xlabel("radius (restored patches)")
    ax.set_ylabel("soft stability")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)

"""SVG figures for the report bundle.

Output is byte-stable: a fixed hash salt and no date metadata, so identical
inputs give identical files.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "shortcut-audit"
matplotlib.rcParams["svg.fonttype"] = "none"

CATEGORY_COLORS = {
    "DataLeakage": "#c0392b",
    "RelativeArtifact": "#d68910",
    "TaskAgnostic": "#2874a6",
    "Benign": "#7f8c8d",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_ami_topk(entries: Sequence[dict], path: str | Path, categories: dict[str, str] | None = None,
                  title: str = "Top-k fields by AMI") -> Path:
    """Horizontal bars, highest AMI at the top; bars coloured by category when known."""
    entries = list(entries)
    names = [e["field"] for e in entries][::-1]
    values = [e["ami"] for e in entries][::-1]
    colors = [CATEGORY_COLORS.get((categories or {}).get(n, ""), "#34495e") for n in names]
    fig, ax = plt.subplots(figsize=(7, 0.4 * max(len(names), 3) + 1.2))
    ax.barh(range(len(names)), values, color=colors)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.set_xlabel("AMI")
    ax.set_xlim(min(0.0, min(values, default=0.0)), max(1.0, max(values, default=0.0)))
    ax.set_title(title)
    if categories:
        used = sorted({categories.get(n) for n in names if categories.get(n) in CATEGORY_COLORS})
        handles = [plt.Rectangle((0, 0), 1, 1, color=CATEGORY_COLORS[c]) for c in used]
        if handles:
            ax.legend(handles, used, loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_kl_densities(rows: Sequence[dict], field: str, path: str | Path, kl_avg: float | None = None) -> Path:
    """Per-class density curves for one field, one line style per dataset tag.

    ``rows`` are density table rows with keys field, class, dataset, x, density.
    """
    curves: dict[tuple[str, str], tuple[list[float], list[float]]] = defaultdict(lambda: ([], []))
    for r in rows:
        if r["field"] != field:
            continue
        xs, ys = curves[(str(r["class"]), str(r["dataset"]))]
        xs.append(float(r["x"]))
        ys.append(float(r["density"]))
    classes = sorted({c for c, _ in curves})
    datasets = sorted({d for _, d in curves})
    styles = ["-", "--", ":", "-."]
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(7, 4))
    for ci, c in enumerate(classes):
        for di, d in enumerate(datasets):
            if (c, d) not in curves:
                continue
            xs, ys = curves[(c, d)]
            ax.plot(xs, ys, styles[di % len(styles)], color=cmap(ci % 10), linewidth=1.2, label=f"{c} / {d}")
    ax.set_xlabel(field)
    ax.set_ylabel("density")
    title = f"Class-conditional densities: {field}"
    if kl_avg is not None:
        title += f" (mean KL {kl_avg:.3f})"
    ax.set_title(title)
    if curves:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def plot_accuracy(report: dict, path: str | Path) -> Path:
    """Mean test accuracy per strategy with per-repeat points and a chance line."""
    results = [report["baseline"]] + list(report["strategies"])
    names = [r["name"] for r in results]
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(names) + 2), 4))
    ax.bar(range(len(names)), [r["mean"] for r in results], color="#5d6d7e")
    for i, r in enumerate(results):
        ax.plot([i] * len(r["accuracies"]), r["accuracies"], "o", color="black", markersize=3)
    ax.axhline(report["chance"], color="#c0392b", linestyle="--", linewidth=1, label="chance")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("test accuracy")
    ax.set_title(f"Decision-tree accuracy under occlusion: {report['dataset']}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)

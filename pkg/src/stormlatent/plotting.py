"""Lead-time score curves rendered to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import NA, ScoreTable  # noqa: E402

SCORES = ("POD", "CSI", "HSS", "FBI")


def _clean(values):
    return [float("nan") if v == NA else float(v) for v in values]


def plot_score_curves(tables: dict[str, ScoreTable], threshold: float, path, title: str | None = None) -> Path:
    """One panel per score, one line per labelled run, lead step on the x axis."""
    path = Path(path)
    fig, axes = plt.subplots(1, len(SCORES), figsize=(4 * len(SCORES), 3.2), constrained_layout=True)
    for ax, name in zip(axes, SCORES):
        for label, table in tables.items():
            ax.plot(table.leads, _clean(table.series(name, threshold)), marker="o", ms=3, label=label)
        ax.set_xlabel("lead step")
        ax.set_title(f"{name} @ {threshold:g}")
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    if title:
        fig.suptitle(title)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_all_thresholds(tables: dict[str, ScoreTable], out_dir, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    first = next(iter(tables.values()))
    return [
        plot_score_curves(tables, th, out_dir / f"{stem}_{th:g}.png", f"{stem} threshold {th:g}")
        for th in first.thresholds
    ]

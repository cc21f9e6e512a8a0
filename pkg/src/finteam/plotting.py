"""Figures written next to CLI report output. Uses the Agg canvas via ``Figure``
directly, so nothing touches pyplot's global state."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
from matplotlib.figure import Figure  # noqa: E402

from .fin_ratios import RatioReport  # noqa: E402

STYLE = {"font.size": 9, "axes.spines.top": False, "axes.spines.right": False}
CATEGORY_COLORS = {"liquidity": "#4C72B0", "leverage": "#DD8452", "profitability": "#55A868", "growth": "#8172B3"}


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    return path


def ratio_figure(report: RatioReport, path: str | Path, title: str = "Financial ratios") -> Path:
    """Horizontal bars per ratio, colored by category; undefined ratios are listed but left empty."""
    with matplotlib.rc_context(STYLE):
        entries = report.entries
        fig = Figure(figsize=(6.0, 0.45 * len(entries) + 1.2))
        ax = fig.add_subplot()
        ys = range(len(entries))
        values = [e.value if e.value is not None else 0.0 for e in entries]
        colors = [CATEGORY_COLORS.get(e.category, "grey") for e in entries]
        ax.barh(list(ys), values, color=colors)
        ax.set_yticks(list(ys), [e.name for e in entries])
        ax.invert_yaxis()
        ax.axvline(0.0, color="black", linewidth=0.6)
        for y, e in zip(ys, entries):
            label = f"{e.value:.4g}" if e.value is not None else "undefined"
            ax.annotate(label, (values[y], y), xytext=(3, 0), textcoords="offset points", va="center", fontsize=8)
        ax.set_title(title)
        ax.set_xlabel("value")
        return _save(fig, path)


def judge_means_figure(per_model: Mapping[str, Mapping[str, float]], path: str | Path,
                       title: str = "Judge scores (mean)") -> Path:
    """Grouped bars: one group per dimension, one bar per model."""
    with matplotlib.rc_context(STYLE):
        models = sorted(per_model)
        dims = list(next(iter(per_model.values())).keys()) if per_model else []
        fig = Figure(figsize=(max(5.0, 1.3 * len(dims)), 3.2))
        ax = fig.add_subplot()
        width = 0.8 / max(1, len(models))
        for i, m in enumerate(models):
            xs = [d + (i - (len(models) - 1) / 2) * width for d in range(len(dims))]
            ax.bar(xs, [per_model[m][d] for d in dims], width=width, label=m)
        ax.set_xticks(list(range(len(dims))), dims)
        ax.set_ylim(0, 5.2)
        ax.set_ylabel("score (1-5)")
        ax.set_title(title)
        if models:
            ax.legend(frameon=False, fontsize=8)
        return _save(fig, path)

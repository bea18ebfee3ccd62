"""Figure rendering for report paths.

The stats report mirrors the dataset's task/chart-type distributions as
two pie charts; the ablation report gets a success-rate bar chart. Files
are written next to the delimited/JSON output.
"""

from __future__ import annotations

from pathlib import Path

from .figgen import AblationReport
from .store import StatsReport


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_stats_figures(report: StatsReport, out_dir: str | Path) -> list[Path]:
    """Write task_distribution.png and chart_type_distribution.png."""
    plt = _pyplot()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    panels = [
        ("task_distribution.png", "Task types", report.task_counts),
        ("chart_type_distribution.png", "Chart types", report.chart_type_counts),
    ]
    for filename, title, counts in panels:
        fig, ax = plt.subplots(figsize=(6, 6))
        labels = list(counts)
        values = [counts[k] for k in labels]
        ax.pie(
            values,
            labels=labels,
            autopct="%1.1f%%",
            startangle=90,
            colors=plt.cm.tab20.colors[: len(labels)],
        )
        ax.set_title(title)
        ax.axis("equal")
        path = out / filename
        fig.savefig(path, bbox_inches="tight", dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def render_ablation_figure(report: AblationReport, path: str | Path) -> Path:
    """Write a bar chart of per-variant success rates."""
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [row.label for row in report.rows]
    rates = [row.rate for row in report.rows]
    bars = ax.bar(labels, rates, color="steelblue")
    ax.bar_label(bars, fmt="%.1f%%")
    ax.set_ylabel("Success rate (%)")
    ax.set_ylim(0, 105)
    ax.set_title("Render success by prompt variant")
    plt.setp(ax.get_xticklabels(), rotation=15, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

"""Matplotlib figures written next to the report tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRIC_TITLES, METRICS, EvalReport, SingleClassError, roc_curve  # noqa: E402

# fixed metadata keeps PNG bytes stable between runs
_PNG_META = {"Software": None}


def _save(fig, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)


def metric_bars(report: EvalReport, metric: str, path):
    """Grouped bars: one group per category plus Average, one bar per method."""
    header, body = report.table(metric)
    methods = header[1:]
    labels = [row[0] for row in body]
    x = np.arange(len(labels))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(labels), 3.6))
    for j, m in enumerate(methods):
        vals = [np.nan if row[j + 1] is None else row[j + 1] for row in body]
        ax.bar(x + (j - (len(methods) - 1) / 2) * width, vals, width, label=m)
    ax.set_xticks(x, labels)
    ax.set_ylim(0, 1.05)
    ax.axhline(0.5, color="grey", lw=0.8, ls=":")
    ax.set_ylabel(metric)
    ax.set_title(METRIC_TITLES.get(metric, metric))
    ax.legend(fontsize=7, loc="upper left", bbox_to_anchor=(1.01, 1.0))
    _save(fig, Path(path))


def object_roc(curves: dict, title: str, path):
    """ROC curves of object scores; `curves` maps method -> (scores, labels)."""
    fig, ax = plt.subplots(figsize=(3.8, 3.6))
    for method, (scores, labels) in curves.items():
        try:
            fpr, tpr = roc_curve(scores, labels)
        except SingleClassError:
            continue
        ax.plot(fpr, tpr, drawstyle="steps-post", label=method)
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(fontsize=7, loc="lower right")
    _save(fig, Path(path))


def render_figures(report: EvalReport, out_dir, object_curves: dict | None = None) -> list:
    """Bar chart per metric, plus per-category object ROC curves when scores are given."""
    out_dir = Path(out_dir) / "figures"
    written = []
    for metric in METRICS:
        p = out_dir / f"{metric}.png"
        metric_bars(report, metric, p)
        written.append(p)
    for cat, curves in sorted((object_curves or {}).items()):
        p = out_dir / f"roc_{cat}.png"
        object_roc(curves, f"{cat}: object-level ROC", p)
        written.append(p)
    return written

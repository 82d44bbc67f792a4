"""Score propagation, AUROC/AUPR, and per-category report tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .spatial import SpatialIndex

METRICS = ("o_auroc", "o_aupr", "p_auroc", "p_aupr")
METRIC_TITLES = {
    "o_auroc": "Object-level AUROC",
    "o_aupr": "Object-level AUPR",
    "p_auroc": "Point-level AUROC",
    "p_aupr": "Point-level AUPR",
}


class SingleClassError(ValueError):
    """Raised when a ranking metric is asked about labels of only one class."""


def propagate_scores(sampled_points, sampled_scores, full_points, k: int = 3) -> np.ndarray:
    """Inverse-distance-weighted kNN interpolation onto a denser point set.

    A full point within 1e-12 of a sampled point takes that point's score exactly.
    """
    sampled_points = np.asarray(sampled_points, dtype=np.float64)
    sampled_scores = np.asarray(sampled_scores, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(sampled_points) == 0:
        raise ValueError("no sampled points to propagate from")
    k = min(k, len(sampled_points))
    idx, dist = SpatialIndex(sampled_points).knn_batch(np.asarray(full_points, dtype=np.float64), k)
    vals = sampled_scores[idx]
    coincide = dist[:, 0] < 1e-12
    w = 1.0 / np.where(coincide[:, None], 1.0, dist)
    out = (w * vals).sum(axis=1) / w.sum(axis=1)
    out[coincide] = vals[coincide, 0]
    # guard against rounding outside the convex hull of the neighbour values
    return np.clip(out, vals.min(axis=1), vals.max(axis=1))


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise SingleClassError("metric undefined: labels contain a single class")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic P(s+ > s-) + P(s+ == s-)/2 via midranks."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision over descending unique thresholds, ties grouped."""
    s, y = _check(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    precision = tp / (last + 1.0)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_curve(scores, labels):
    """(fpr, tpr) at every unique threshold, starting from (0, 0)."""
    s, y = _check(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return np.r_[0.0, fp / fp[-1]], np.r_[0.0, tp / tp[-1]]


@dataclass
class SampleScores:
    """Scores for one test sample at full resolution."""

    name: str
    object_label: int
    object_score: float
    point_scores: np.ndarray
    point_labels: np.ndarray


def evaluate_category(samples: list[SampleScores], micro: bool = False) -> dict:
    """Four metrics for one category.

    Point-level metrics pool every point of every test sample by default. With
    ``micro=True`` they are averaged over abnormal samples instead (normal
    samples have no positive points so they are skipped).
    """
    obj_s = [s.object_score for s in samples]
    obj_y = [s.object_label for s in samples]
    row = {"o_auroc": auroc(obj_s, obj_y), "o_aupr": aupr(obj_s, obj_y)}
    if micro:
        per = [(auroc(s.point_scores, s.point_labels), aupr(s.point_scores, s.point_labels))
               for s in samples if 0 < np.sum(s.point_labels) < len(s.point_labels)]
        if not per:
            raise SingleClassError("no sample has both normal and anomalous points")
        row["p_auroc"] = float(np.mean([p[0] for p in per]))
        row["p_aupr"] = float(np.mean([p[1] for p in per]))
    else:
        ps = np.concatenate([s.point_scores for s in samples])
        py = np.concatenate([s.point_labels for s in samples])
        row["p_auroc"] = auroc(ps, py)
        row["p_aupr"] = aupr(ps, py)
    return row


@dataclass
class EvalReport:
    """Metric rows keyed by method then category, plus run metadata."""

    rows: dict = field(default_factory=dict)  # method -> category -> {metric: value}
    meta: dict = field(default_factory=dict)

    def add(self, method: str, category: str, row: dict):
        self.rows.setdefault(method, {})[category] = dict(row)

    @property
    def methods(self):
        """Methods in ``meta["methods"]`` order when recorded, else insertion order."""
        order = [m for m in self.meta.get("methods", []) if m in self.rows]
        return order + [m for m in self.rows if m not in order]

    @property
    def categories(self):
        cats = []
        for per in self.rows.values():
            cats.extend(c for c in per if c not in cats)
        return sorted(cats)

    def average(self, method: str, metric: str) -> float:
        vals = [r[metric] for r in self.rows[method].values() if metric in r]
        return float(np.mean(vals)) if vals else float("nan")

    def table(self, metric: str):
        """Header and rows: one row per category plus "Average", one column per method."""
        header = ["category"] + self.methods
        body = []
        for cat in self.categories:
            body.append([cat] + [self.rows[m].get(cat, {}).get(metric) for m in self.methods])
        body.append(["Average"] + [self.average(m, metric) for m in self.methods])
        return header, body

    def to_dict(self):
        return {"rows": self.rows, "meta": self.meta}

    @classmethod
    def from_dict(cls, d):
        return cls(rows=d.get("rows", {}), meta=d.get("meta", {}))


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "-"
    return f"{v:.3f}"


def table_csv(report: EvalReport, metric: str) -> str:
    header, body = report.table(metric)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in body:
        w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
    return buf.getvalue()


def table_markdown(report: EvalReport, metric: str) -> str:
    header, body = report.table(metric)
    lines = [f"### {METRIC_TITLES.get(metric, metric)}", "",
             "| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] + [":---:"] * (len(header) - 1)) + "|"]
    for row in body:
        cells = [row[0]] + [_fmt(v) for v in row[1:]]
        if row[0] == "Average":
            cells = [f"**{c}**" for c in cells]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def report_markdown(report: EvalReport) -> str:
    parts = ["# Benchmark report", ""]
    for metric in METRICS:
        parts.append(table_markdown(report, metric))
    return "\n".join(parts)


def format_score_dump(scores, labels) -> str:
    """One "index score label" line per point; scores as exact float reprs."""
    return "".join(f"{i} {float(s)!r} {int(l)}\n" for i, (s, l) in enumerate(zip(scores, labels)))


def parse_score_dump(text: str):
    scores, labels = [], []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        _, s, l = line.split()
        scores.append(float(s))
        labels.append(int(l))
    return np.array(scores), np.array(labels, dtype=np.uint8)

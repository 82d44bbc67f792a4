"""Config-driven benchmark: every (method, category) pair, tables, dumps, figures."""

from __future__ import annotations

import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .dataio import _atomic_write, load_dataset, read_labels_txt
from .methods import ALL_METHODS, MethodId, MethodParams, params_closure, run_method
from .metrics import (
    METRICS, EvalReport, SampleScores, evaluate_category, format_score_dump, parse_score_dump,
    report_markdown, table_csv,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


@dataclass
class BenchConfig:
    """Benchmark settings; see README for the JSON schema.

    `params` override MethodParams for every method, `method_params` override
    them again per method.
    """

    dataset: str | None = None
    methods: list = field(default_factory=lambda: list(ALL_METHODS))
    seed: int = 0
    out: str | None = None
    workers: int = 1
    categories: list | None = None
    micro: bool = False
    figures: bool = True
    params: dict = field(default_factory=dict)
    method_params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.methods = [MethodId.parse(m).value for m in self.methods]
        for m in self.method_params:
            MethodId.parse(m)
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        for m in self.methods:
            self.params_for(m)  # validates ratios and unknown keys early

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "BenchConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def params_for(self, method: str) -> MethodParams:
        merged = {**self.params, **self.method_params.get(method, {})}
        if "registration" in self.params and "registration" in self.method_params.get(method, {}):
            merged["registration"] = {**self.params["registration"], **self.method_params[method]["registration"]}
        return MethodParams.from_dict(merged)

    def to_dict(self):
        return asdict(self)


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, text.encode("utf-8"))


def _write_json(path: Path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_task(args):
    method, entry, params, seed = args
    try:
        results, fit_s = run_method(method, entry, params, seed)
        return {"ok": True, "results": results, "fit_seconds": fit_s}
    except Exception as exc:  # recorded and skipped, never fatal for the whole run
        log.exception("%s on %s failed", method, entry.name)
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def write_dumps(out_dir: Path, method: str, category: str, samples: list):
    cdir = out_dir / "scores" / method / category
    for s in samples:
        _write_text(cdir / f"{s.name}.txt", format_score_dump(s.point_scores, s.point_labels))
    lines = "".join(f"{s.name} {float(s.object_score)!r} {s.object_label}\n" for s in samples)
    _write_text(cdir / "objects.txt", lines)


def write_report(report: EvalReport, out_dir, object_curves=None, figures: bool = True):
    """CSV per metric, report.md, metrics.json and (optionally) figures."""
    out_dir = Path(out_dir)
    for metric in METRICS:
        _write_text(out_dir / f"{metric}.csv", table_csv(report, metric))
    _write_text(out_dir / "report.md", report_markdown(report))
    _write_json(out_dir / "metrics.json", report.to_dict())
    if figures:
        from .plotting import render_figures

        render_figures(report, out_dir, object_curves)


def run_benchmark(config: BenchConfig, out_dir=None):
    """Run every configured (method, category) pair and write all artifacts.

    Returns:
        (EvalReport, exit code): 0 when everything ran, 2 when some pairs were
        skipped after an error, 1 when nothing could be evaluated.
    """
    out_dir = Path(out_dir or config.out or "bench_out")
    if not config.dataset or not Path(config.dataset).is_dir():
        raise FileNotFoundError(f"dataset root {config.dataset!r} does not exist")
    ds = load_dataset(config.dataset)
    entries = [c for c in ds.categories if config.categories is None or c.name in config.categories]
    if not entries:
        raise ValueError("no categories selected")
    tasks = [(m, e, config.params_for(m), config.seed) for m in config.methods for e in entries]
    t0 = time.perf_counter()
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            outcomes = list(pool.map(_run_task, tasks))
    else:
        outcomes = [_run_task(t) for t in tasks]

    report = EvalReport(meta={"seed": config.seed, "methods": config.methods,
                              "categories": [e.name for e in entries], "micro": config.micro})
    failures, timings, registration = [], {}, {}
    curves = {}
    for (method, entry, _, _), outcome in zip(tasks, outcomes):
        key = f"{method}/{entry.name}"
        if not outcome["ok"]:
            failures.append({"method": method, "category": entry.name, "error": outcome["error"]})
            continue
        samples = [r.scores for r in outcome["results"]]
        write_dumps(out_dir, method, entry.name, samples)
        timings[key] = {"fit_seconds": outcome["fit_seconds"],
                        "sample_seconds": {r.scores.name: r.seconds for r in outcome["results"]}}
        if method == MethodId.REG3D_AD.value:
            registration[entry.name] = {r.scores.name: r.registration for r in outcome["results"]}
        try:
            report.add(method, entry.name, evaluate_category(samples, micro=config.micro))
        except ValueError as exc:
            failures.append({"method": method, "category": entry.name, "error": str(exc)})
            continue
        curves.setdefault(entry.name, {})[method] = ([s.object_score for s in samples],
                                                     [s.object_label for s in samples])
    if report.rows:
        write_report(report, out_dir, curves, config.figures)
    manifest = {
        "config": config.to_dict(),
        "params": {m: params_closure(config.params_for(m)) for m in config.methods},
        "versions": {"reg3dad": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "timings": {"total_seconds": time.perf_counter() - t0, "tasks": timings},
        "registration": registration,
        "failures": failures,
    }
    _write_json(out_dir / "manifest.json", manifest)
    if not report.rows:
        return report, EXIT_FATAL
    return report, EXIT_PARTIAL if failures else EXIT_OK


def load_scores(scores_dir, gt_root=None):
    """Rebuild per-category SampleScores from dumps.

    With `gt_root`, labels come from the dataset instead of the dumps: a stem
    ending in "good" is normal, any other sample reads ``<cat>/gt/<stem>.txt``.

    Returns:
        {method: {category: [SampleScores]}}
    """
    scores_dir = Path(scores_dir)
    out = {}
    order = {m: i for i, m in enumerate(ALL_METHODS)}
    mdirs = sorted((p for p in scores_dir.iterdir() if p.is_dir()), key=lambda p: (order.get(p.name, len(order)), p.name))
    for mdir in mdirs:
        for cdir in sorted(p for p in mdir.iterdir() if p.is_dir()):
            objects = (cdir / "objects.txt").read_text(encoding="utf-8").split("\n")
            samples = []
            for line in filter(None, objects):
                name, score, label = line.split()
                pts, plabels = parse_score_dump((cdir / f"{name}.txt").read_text(encoding="utf-8"))
                olabel = int(label)
                if gt_root is not None:
                    olabel = 0 if name.endswith("good") else 1
                    gt = Path(gt_root) / cdir.name / "gt" / f"{name}.txt"
                    plabels = read_labels_txt(gt, len(pts)) if olabel else np.zeros(len(pts), dtype=np.uint8)
                samples.append(SampleScores(name, olabel, float(score), pts, plabels))
            out.setdefault(mdir.name, {})[cdir.name] = samples
    return out


def evaluate_scores(scores_dir, gt_root=None, micro: bool = False):
    """EvalReport and object curves recomputed from score dumps."""
    report = EvalReport(meta={"source": str(scores_dir), "micro": micro})
    curves = {}
    for method, cats in load_scores(scores_dir, gt_root).items():
        for cat, samples in cats.items():
            report.add(method, cat, evaluate_category(samples, micro=micro))
            curves.setdefault(cat, {})[method] = ([s.object_score for s in samples],
                                                  [s.object_label for s in samples])
    report.meta["methods"] = list(report.rows)
    return report, curves

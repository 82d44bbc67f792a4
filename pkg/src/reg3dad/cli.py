"""Command-line entry point: generate, run, eval, report.

Settings resolve as built-in defaults, then the config file, then flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import EXIT_FATAL, EXIT_OK, BenchConfig, evaluate_scores, run_benchmark, write_report
from .metrics import METRICS, EvalReport, report_markdown, table_csv

log = logging.getLogger("reg3dad")


def _cmd_generate(args):
    from .synthetic import generate_suite, full_scale_config

    cfg = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if args.full_scale:
        cfg = {**full_scale_config(), **cfg}
    if args.seed is not None:
        cfg["master_seed"] = args.seed
    index = generate_suite(cfg, args.out)
    for c in index.categories:
        print(f"{c.name}: {len(c.train_paths)} prototypes, {len(c.test_paths)} test scans")
    return EXIT_OK


def _cmd_run(args):
    d = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if args.dataset:
        d["dataset"] = args.dataset
    if args.out:
        d["out"] = args.out
    if args.methods:
        d["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.seed is not None:
        d["seed"] = args.seed
    if args.workers is not None:
        d["workers"] = args.workers
    config = BenchConfig.from_dict(d)
    report, code = run_benchmark(config, config.out)
    print(report_markdown(report) if report.rows else "no category could be evaluated")
    return code


def _cmd_eval(args):
    report, curves = evaluate_scores(args.scores, args.gt, micro=args.micro)
    if args.out:
        write_report(report, args.out, curves, figures=not args.no_figures)
    _print(report, args.format)
    return EXIT_OK


def _cmd_report(args):
    src = Path(getattr(args, "in"))
    report = EvalReport.from_dict(json.loads((src / "metrics.json").read_text(encoding="utf-8")))
    curves = None
    if (src / "scores").is_dir():
        _, curves = evaluate_scores(src / "scores")
    write_report(report, src, curves, figures=not args.no_figures)
    _print(report, args.format)
    return EXIT_OK


def _print(report, fmt):
    if fmt == "csv":
        for metric in METRICS:
            print(f"# {metric}")
            print(table_csv(report, metric), end="")
    else:
        print(report_markdown(report))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reg3dad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", help="suite JSON (omitted keys take defaults)")
    g.add_argument("--out", required=True, help="dataset root to create")
    g.add_argument("--seed", type=int, help="master seed override")
    g.add_argument("--full-scale", action="store_true", help="12 categories x (4 + 50 + 50)")
    g.set_defaults(func=_cmd_generate)

    r = sub.add_parser("run", help="benchmark methods on a dataset")
    r.add_argument("--config", help="benchmark JSON")
    r.add_argument("--dataset", help="dataset root")
    r.add_argument("--out", help="output directory")
    r.add_argument("--methods", help="comma-separated method ids")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int, help="parallel (method, category) tasks")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("eval", help="recompute metrics from score dumps")
    e.add_argument("--scores", required=True, help="scores/ directory of a run")
    e.add_argument("--gt", help="dataset root to take labels from (default: labels in the dumps)")
    e.add_argument("--out", help="also write tables and figures here")
    e.add_argument("--micro", action="store_true", help="average point metrics per sample")
    e.add_argument("--format", choices=("csv", "md"), default="md")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=_cmd_eval)

    rep = sub.add_parser("report", help="re-render tables and figures of a finished run")
    rep.add_argument("--in", required=True, help="run output directory")
    rep.add_argument("--format", choices=("csv", "md"), default="md")
    rep.add_argument("--no-figures", action="store_true")
    rep.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())

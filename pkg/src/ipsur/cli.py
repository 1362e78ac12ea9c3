"""Command-line entry point.

Subcommands::

    ipsur run <config.json>            run or resume a campaign
    ipsur summarize <record.csv>       per-iteration means and 95% intervals
    ipsur plot <summary.csv> -o <dir>  one SVG chart per metric
    ipsur oracle <suite>               run a battery of numerical oracles

Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _cmd_run(args):
    from .harness import ExperimentConfig, run_experiment, summarize, write_summary

    cfg = ExperimentConfig.from_json(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    record = run_experiment(cfg, workers=args.workers)
    failed = sorted({(r["strategy"], r["replicate"]) for r in record.rows if r["status"] != "ok"})
    summary = summarize(record)
    if summary:
        write_summary(summary, Path(cfg.output_dir) / "summary.csv")
    print(f"record written to {record.path} ({len(record.rows)} rows)")
    if failed:
        for lab, rep in failed:
            print(f"failed cell: strategy {lab}, replicate {rep}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_summarize(args):
    from .harness import summarize, write_summary

    summary = summarize(args.record)
    out = args.output or str(Path(args.record).with_name("summary.csv"))
    write_summary(summary, out)
    final = {}
    for r in summary:
        final[(r["strategy"], r["metric"])] = r
    for (lab, metric), r in sorted(final.items()):
        flag = " (single replicate)" if r["degenerate"] else ""
        print(f"{lab:>14s} {metric:>8s} it={r['iteration']:>3d} mean={r['mean']:.4g} "
              f"95% CI=[{r['ci_low']:.4g}, {r['ci_high']:.4g}]{flag}")
    print(f"summary written to {out}")
    return EXIT_OK


def _cmd_plot(args):
    from .harness import emit_plots, read_summary

    files = emit_plots(read_summary(args.summary), args.output)
    for f in files:
        print(f)
    return EXIT_OK


def _cmd_oracle(args):
    from .oracles import run_suite

    results = run_suite(args.suite)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def build_parser():
    parser = argparse.ArgumentParser(prog="ipsur", description="Sequential design for surrogate-based Bayesian inverse problems.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run or resume a campaign from a JSON configuration")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None, help="override the configured output directory")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel replicate workers (default: $IPSUR_WORKERS or 1)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("summarize", help="per-iteration mean and 95%% interval of every metric")
    p.add_argument("record")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("plot", help="SVG metric charts from a summary CSV")
    p.add_argument("summary")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_plot)

    from .oracles import SUITES

    p = sub.add_parser("oracle", help="run a numerical oracle battery")
    p.add_argument("suite", choices=sorted(SUITES))
    p.set_defaults(func=_cmd_oracle)
    return parser


def main(argv=None):
    from .gp import GPError
    from .harness import ConfigError
    from .mcmc import SamplerError
    from .optim import OptimizerError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GPError, SamplerError, OptimizerError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

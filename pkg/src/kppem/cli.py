"""Command-line entry point: ``kppem {run,rate,compare,snapshot}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .harness import (ConfigError, DEFAULT_RATE, cmd_compare, cmd_rate,
                      cmd_run, cmd_snapshot, parse_iterations)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kppem",
        description="EM, Kullback proximal point and trust-region KPP "
                    "experiments on Poisson deblurring problems.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every solver of a config file")
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--out", metavar="DIR", help="override output_dir")
    p.add_argument("--seed", type=int, metavar="N",
                   help="override instance.seed")

    p = sub.add_parser("rate", help="convergence-rate report for a trace")
    p.add_argument("trace")
    p.add_argument("--tail", type=float, default=DEFAULT_RATE["tail"],
                   metavar="FRACTION")
    p.add_argument("--json", action="store_true", help="print JSON")

    p = sub.add_parser("compare", help="align traces and report crossovers")
    p.add_argument("traces", nargs="+",
                   help="trace files; the first one is the baseline")
    p.add_argument("--out", metavar="FILE", help="write the aligned table")

    p = sub.add_parser("snapshot", help="extract stored iterates")
    p.add_argument("trace")
    p.add_argument("--iterations", default="", metavar="LIST",
                   help="comma-separated iterations, 'final' allowed")
    p.add_argument("--out", required=True, metavar="FILE")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            code = cmd_run(args.config, out=args.out, seed=args.seed)
            if code:
                print("one or more solvers failed; see summary.csv",
                      file=sys.stderr)
            return code
        if args.command == "rate":
            report = cmd_rate(args.trace, tail=args.tail)
            if args.json:
                print(json.dumps(report.as_dict(), indent=2))
            else:
                print(f"classification: {report.classification}")
                print(f"tail median ratio: {report.median_ratio:.6g}")
                print(f"tail slope of log ratio: {report.slope:.6g}")
                shown = report.tail[-10:]
                print(f"tail ratios ({len(report.tail)}, last {len(shown)}): "
                      + " ".join(f"{r:.4g}" for r in shown))
                for note in report.notes:
                    print(f"note: {note}")
            return 0
        if args.command == "compare":
            comparison = cmd_compare(args.traces, out=args.out)
            for name, k in comparison.crossovers.items():
                print(f"crossover {name} vs {comparison.names[0]}: "
                      f"{'none' if k is None else k}")
            if args.out is None:
                sys.stdout.write(comparison.to_csv())
            return 0
        out = cmd_snapshot(args.trace, parse_iterations(args.iterations),
                           args.out)
        print(f"wrote {out}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

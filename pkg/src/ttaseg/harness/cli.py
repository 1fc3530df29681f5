"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input-file error, 3 numeric
failure (a loss or parameter became NaN/Inf).
"""

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from ..exceptions import ConfigError, FileFormatError, NumericFailure
from .config import load_config
from .results import filter_rows, read_rows

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=default, help="top-level seed (overrides the config)")
    parser.add_argument("--out", default=argparse.SUPPRESS if suppress else "results", help="output directory")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="BLAS threads")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    p = argparse.ArgumentParser(prog="ttaseg", description="Test-time adaptation experiments on phantoms.")
    _global_flags(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train-source", parents=[common], help="train the source network and save a checkpoint")

    s = sub.add_parser("adapt-eval", parents=[common], help="evaluate every method over the shift grids")
    s.add_argument("--checkpoint")
    s.add_argument("--kinds", nargs="+", choices=["rotation", "scaling", "smoothing", "gamma"])

    s = sub.add_parser("sweep", parents=[common], help="sweep lambda, m or the learning rate")
    s.add_argument("--axis", required=True, choices=["lambda", "m", "lr"])
    s.add_argument("--checkpoint")

    s = sub.add_parser("growth-curve", parents=[common], help="Dice across growth bins")
    s.add_argument("--checkpoint")

    s = sub.add_parser("compare", parents=[common], help="paired t-test of per-sample mean Dice")
    s.add_argument("csv_a")
    s.add_argument("csv_b", nargs="?", help="defaults to csv_a (filter the two sides differently)")
    for side in ("a", "b"):
        s.add_argument(f"--method-{side}")
        s.add_argument(f"--mode-{side}")
        s.add_argument(f"--param-{side}")
    s.add_argument("--kind")
    s.add_argument("--magnitude", type=float)

    s = sub.add_parser("plot", parents=[common], help="render a results CSV as SVG")
    s.add_argument("csv")
    s.add_argument("--output", required=True, help="SVG path")
    s.add_argument("--style", choices=["shift", "sweep", "growth"], default="shift")
    s.add_argument("--title", default="")

    sub.add_parser("run-acceptance", parents=[common], help="train, evaluate and check the acceptance criteria")
    return p


def _select(rows, method, mode, param, kind, magnitude):
    crit = {}
    if method:
        crit["method"] = method
    if mode:
        crit["mode"] = mode
    if param is not None:
        crit["param"] = param
    if kind:
        crit["shift_kind"] = kind
    if magnitude is not None:
        crit["magnitude"] = magnitude
    return filter_rows(rows, **crit)


def _run(args):
    from . import commands
    from .acceptance import run_acceptance

    if args.command == "compare":
        rows_a = read_rows(args.csv_a)
        rows_b = read_rows(args.csv_b) if args.csv_b else rows_a
        a = _select(rows_a, args.method_a, args.mode_a, args.param_a, args.kind, args.magnitude)
        b = _select(rows_b, args.method_b, args.mode_b, args.param_b, args.kind, args.magnitude)
        print(commands.cmd_compare(a, b).report())
        return EXIT_OK
    if args.command == "plot":
        rows = read_rows(args.csv)
        x = "param" if args.style == "sweep" else "magnitude"
        commands.cmd_plot(rows, args.output, x=x, title=args.title, week_axis=args.style == "growth")
        return EXIT_OK

    cfg = load_config(args.config, seed=args.seed)
    if args.command == "train-source":
        _, dice = commands.cmd_train_source(cfg, args.out)
        print(f"in-distribution mean Dice: {dice:.4f}")
    elif args.command == "adapt-eval":
        commands.cmd_adapt_eval(cfg, args.out, kinds=args.kinds, checkpoint=args.checkpoint)
    elif args.command == "sweep":
        commands.cmd_sweep(cfg, args.out, args.axis, checkpoint=args.checkpoint)
    elif args.command == "growth-curve":
        commands.cmd_growth_curve(cfg, args.out, checkpoint=args.checkpoint)
    elif args.command == "run-acceptance":
        summary = run_acceptance(cfg, args.out)
        for name, value, threshold, passed in summary:
            print(f"{'PASS' if passed else 'FAIL'} {name}: {value:.6g} (threshold {threshold:g})")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(args.threads):
            return _run(args)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FileFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

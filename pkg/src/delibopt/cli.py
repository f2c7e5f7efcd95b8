"""Command line entry point: ``delibopt run|sweep|render|aggregate``."""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

from . import harness
from .mdp import ValidationError


def _cmd_run(args, jobs=None) -> int:
    config = harness.load_config(args.config)
    summary = harness.run_experiment(config, jobs=jobs)
    for run in summary["runs"]:
        print(f"eta={run['eta']:g} seed={run['seed']} return={run['final_return']:.4f} "
              f"termination={run['final_mean_termination']:.3f} "
              f"greedy/opt={run['greedy_value'] / run['optimal_value']:.3f}")
    print(f"wrote {config.resolved_output()}")
    return 0


def _cmd_sweep(args) -> int:
    return _cmd_run(args, jobs=args.jobs)


def _cmd_render(args) -> int:
    layout = harness.resolve_layout(args.layout)
    traj = harness.load_trajectory(args.trajectory)
    text, svg = harness.render_trajectory(layout, traj, args.mode)
    print(text, end="")
    out = Path(args.out) if args.out else Path(args.trajectory).with_name(
        f"{Path(args.trajectory).stem}_{args.mode}.svg")
    out.write_text(svg)
    print(f"wrote {out}", file=sys.stderr)
    return 0


def _cmd_aggregate(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = harness.aggregate_sweep(args.dir, n_bins=args.bins)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if not result["rows"]:
        print(f"no complete runs under {args.dir}", file=sys.stderr)
        return 1
    print("eta      n  final_return  mean_termination  auc")
    for eta, m in result["means"].items():
        print(f"{eta:<8g} {m['n']:<2d} {m['final_return']:<13.4f} "
              f"{m['final_mean_termination']:<17.3f} {m['auc']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delibopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every (eta, seed) pair of a config, one at a time")
    p.add_argument("config")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="like run, but spread runs over worker processes")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=None, help="processes (default: config value)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("render", help="draw a trajectory as a text map and an SVG")
    p.add_argument("layout", help="layout file or builtin name (four_rooms, ladder, plus)")
    p.add_argument("trajectory")
    p.add_argument("--mode", choices=("options", "terminations"), default="options")
    p.add_argument("--out", help="SVG path (default: next to the trajectory)")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("aggregate", help="collect finished runs into sweep tables")
    p.add_argument("dir")
    p.add_argument("--bins", type=int, default=50)
    p.set_defaults(func=_cmd_aggregate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

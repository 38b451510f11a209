"""Command line entry point: ``idmlab run|verify|plot|oracle``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import verifier
from .datasets import build_test_set
from .gridworld import generate_maze, solve_expert
from .harness.config import load_config
from .harness.experiments import aggregate, run_experiment, summary_to_csv
from .harness.metrics import metric_accuracy
from .harness.plots import plot_csv
from .models import ConfigError, analytic_idm_img, analytic_idm_pos


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.out = args.out
    rows = run_experiment(cfg, jobs=args.jobs, seed_offset=args.seed_offset)
    print(summary_to_csv(aggregate(rows)), end="")
    print(f"wrote {Path(cfg.out) / 'results.csv'}", file=sys.stderr)
    return 0


def _cmd_verify(args) -> int:
    trials = verifier.run_trials(args.trials, seed=args.seed_offset)
    report = verifier.format_report(trials)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify_report.jsonl").write_text(report)
    else:
        print(report, end="")
    failed = [t.trial for t in trials if not t.passed()]
    print(
        f"{len(trials)} trials, {len(failed)} failed; max KL residual "
        f"{max(t.kl_residual for t in trials):.3e}, max equivalence residual "
        f"{max(t.equivalence_residual for t in trials):.3e}",
        file=sys.stderr,
    )
    return 1 if failed else 0


def _cmd_plot(args) -> int:
    methods = args.methods.split(",") if args.methods is not None else None
    paths = plot_csv(args.csv, args.out, methods)
    for p in paths:
        print(p)
    return 0


def _cmd_oracle(args) -> int:
    pos, img = analytic_idm_pos(), None
    worst = 1.0
    for i in range(args.mazes):
        seed = i + args.seed_offset
        grid = generate_maze(args.grid_size, seed)
        test = build_test_set(grid, solve_expert(grid))
        img = analytic_idm_img(grid)
        acc_pos = metric_accuracy(pos, test, grid)
        acc_img = metric_accuracy(img, test, grid)
        worst = min(worst, acc_pos, acc_img)
        print(f"maze {args.grid_size}x{args.grid_size} seed={seed} transitions={len(test)} pos_acc={acc_pos:.4f} img_acc={acc_img:.4f}")
    return 0 if worst == 1.0 else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent jobs")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="idmlab", description="IDM vs behavior cloning gridworld experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run an experiment config (JSON path or builtin id)")
    r.add_argument("config")
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("verify", parents=[common], help="tabular identity checks on random MDPs")
    v.add_argument("--trials", type=int, default=100)
    v.set_defaults(func=_cmd_verify)

    pl = sub.add_parser("plot", parents=[common], help="render SVG figures from a results CSV")
    pl.add_argument("csv")
    pl.add_argument("--methods", default=None, help="comma separated method filter")
    pl.set_defaults(func=_cmd_plot)

    o = sub.add_parser("oracle", parents=[common], help="analytic IDM accuracy on random mazes")
    o.add_argument("grid_size", type=int)
    o.add_argument("--mazes", type=int, default=5)
    o.set_defaults(func=_cmd_oracle)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

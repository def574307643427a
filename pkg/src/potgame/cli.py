"""Command-line entry point for batch experiments.

Example::

    potgame-exp --scenario intersection --game continuous,finite --solver potential \\
        --policy nash,constant,random --episodes 200 --seed 7 --jobs 4 --out results/table1
"""
from __future__ import annotations

import argparse
import itertools
import logging
import sys

from .costs import CostParams
from .experiments import FORMATS, Cell, ExperimentSpec, abort_fraction, format_table, run_experiment
from .scenarios import INTERSECTION_PARAMS
from .sim import POLICIES, SOLVERS

MAX_ABORT_FRACTION = 0.01


def _choices(allowed):
    def parse(text: str):
        items = [t.strip() for t in text.split(",") if t.strip()]
        bad = [t for t in items if t not in allowed]
        if not items or bad:
            raise argparse.ArgumentTypeError(f"expected a comma list from {allowed}, got {text!r}")
        return items
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="potgame-exp", description="Run Monte-Carlo driving experiments.")
    p.add_argument("--scenario", choices=("intersection", "lane_change"), default="intersection")
    p.add_argument("--game", type=_choices(("finite", "continuous")), default=["continuous"],
                   help="comma list of game kinds")
    p.add_argument("--solver", type=_choices(SOLVERS), default=["potential"], help="comma list of ego solvers")
    p.add_argument("--policy", type=_choices(POLICIES), default=["nash"],
                   help="comma list of surrounding-vehicle policies")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="output path stem; .txt, .csv and .jsonl files are written")
    p.add_argument("--emit", choices=FORMATS, default="table", help="format printed to stdout")
    p.add_argument("--duration", type=float, default=None, help="episode length in seconds")
    p.add_argument("--interaction-weight", type=float, default=None,
                   help="weight of the pairwise interaction cost")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    params = None
    if args.interaction_weight is not None:
        base = INTERSECTION_PARAMS if args.scenario == "intersection" else CostParams()
        params = CostParams(**{**base.__dict__, "theta_2": args.interaction_weight})
    try:
        cells = tuple(Cell(g, s, p) for g, s, p in itertools.product(args.game, args.solver, args.policy))
        spec = ExperimentSpec(args.scenario, cells, args.episodes, args.seed, args.out, args.jobs, params,
                              args.duration)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    table = run_experiment(spec)
    sys.stdout.write(format_table(table, args.emit))
    frac = abort_fraction(table)
    if frac > MAX_ABORT_FRACTION:
        print(f"error: {frac:.1%} of episodes aborted", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end.

    cryptocubic SCRIPT [--seed N] [--mode M] [--backend B]
                       [--trace PATH] [--ledger PATH] [--journal PATH]
                       [--quiet]

Runs a scenario script and prints the holdings tables plus any attack
verdict lines.  Exit status 0 when every expectation in the script holds,
1 when one fails, 2 on a script syntax error.  Output is a pure function of
(script, seed, mode, backend).
"""
from __future__ import annotations

import argparse
import sys

from .protocol import MODES
from .scenario import ScenarioSyntaxError, parse_scenario, run_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cryptocubic",
        description="run an off-chain transfer scenario and report attack verdicts",
    )
    parser.add_argument("script", help="scenario script file")
    parser.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    parser.add_argument("--mode", choices=MODES, default="cryptocubic")
    parser.add_argument("--backend", choices=("symbolic", "concrete"), default="symbolic")
    parser.add_argument("--trace", metavar="PATH", help="also write the holdings tables here")
    parser.add_argument("--ledger", metavar="PATH", help="write the final ledger dump here")
    parser.add_argument("--journal", metavar="PATH", help="append store mutations here")
    parser.add_argument("--quiet", action="store_true", help="suppress the holdings tables")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.script, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"cannot read {args.script}: {exc}", file=sys.stderr)
        return 2
    try:
        script = parse_scenario(text, seed=args.seed, mode=args.mode, backend=args.backend)
    except ScenarioSyntaxError as exc:
        print(f"{args.script}: {exc}", file=sys.stderr)
        return 2

    result = run_scenario(script, quiet=args.quiet, journal_path=args.journal)
    if args.journal and result.sim is not None:
        result.sim.store.close()
    if result.output:
        sys.stdout.write(result.output)
    if args.trace and result.sim is not None:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(result.sim.render())
    if args.ledger and result.sim is not None:
        with open(args.ledger, "w", encoding="utf-8") as fh:
            fh.write(result.sim.ledger.dump())
    for failure in result.failures:
        print(f"FAIL {failure}", file=sys.stderr)
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())

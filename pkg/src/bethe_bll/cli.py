"""Command-line entry point: ``bethe-bll {run,report,eb-vs-cv,two-moons,verify}``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import bench, verify


def _plan(args) -> bench.Plan:
    plan = bench.load_plan(args.plan)
    if args.seeds:
        plan.seeds = bench.parse_seeds(args.seeds)
    if args.out:
        plan.out = args.out
    return plan


def cmd_run(args) -> int:
    records = bench.cmd_run(_plan(args), jobs=args.jobs)
    failed = sum(r.status != "ok" for r in records)
    print(f"{len(records)} runs, {failed} failed")
    return 0


def cmd_report(args) -> int:
    print(bench.cmd_report(args.records, args.out, args.metric), end="")
    return 0


def cmd_eb_vs_cv(args) -> int:
    for r in bench.cmd_eb_vs_cv(_plan(args), jobs=args.jobs):
        print(f"{r.dataset}\t{r.method}\t{r.mean_diff:+.4f}\tp={r.p_value:.3f}")
    return 0


def cmd_two_moons(args) -> int:
    bench.cmd_two_moons(args.out, args.resolution, args.seed)
    print(f"wrote {args.resolution ** 2} grid rows to {args.out}")
    return 0


def cmd_verify(args) -> int:
    if args.mutate:
        with verify.mutated_adjoint(args.mutate):
            results = verify.run_suites(args.suite)
    else:
        results = verify.run_suites(args.suite)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bethe-bll", description="Bayesian last-layer experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def plan_args(sp):
        sp.add_argument("--plan", required=True)
        sp.add_argument("--seeds", help="a..b (inclusive) or a comma list")
        sp.add_argument("--out", help="output directory (overrides the plan)")
        sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("run", help="run every (dataset, method, seed) cell of a plan")
    plan_args(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("report", help="aggregate a results CSV into markdown and CSV tables")
    sp.add_argument("records")
    sp.add_argument("--out")
    sp.add_argument("--metric", default="nll")
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("eb-vs-cv", help="test-NLL difference between CV and EB per dataset")
    plan_args(sp)
    sp.set_defaults(fn=cmd_eb_vs_cv)

    sp = sub.add_parser("two-moons", help="emit the two-moons uncertainty grid")
    sp.add_argument("--out", default="two_moons.csv")
    sp.add_argument("--resolution", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_two_moons)

    sp = sub.add_parser("verify", help="run the self-check suites")
    sp.add_argument("--suite", action="append", choices=sorted(verify.SUITES))
    sp.add_argument("--mutate", metavar="KIND", help="flip the sign of one backward rule first")
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (bench.PlanError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``pod2c {sysid-check,train,synthesize,evaluate}``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

import numpy as np

from . import harness
from .artifacts import ArtifactError
from .config import OUTPUT_ENV, ConfigError, load_config
from .pomilqr import BackwardPassError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="experiment config (INI)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config entry")
    common.add_argument("--output-dir", help=f"artifact directory (else ${OUTPUT_ENV}, else config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="pod2c", description="Identify, optimise and stabilise a partially observed system.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("sysid-check", parents=[common], help="residual-vs-order table")
    sub.add_parser("train", parents=[common], help="optimise the open-loop nominal")
    s = sub.add_parser("synthesize", parents=[common], help="compute LQG gains around the nominal")
    s.add_argument("--trajectory", help="trajectory file (default: <output-dir>/trajectory.txt)")
    e = sub.add_parser("evaluate", parents=[common], help="Monte-Carlo noise sweeps")
    e.add_argument("--policy", help="policy file (default: <output-dir>/policy.txt)")
    e.add_argument("--plots", action="store_true", help="also write SVG plots")
    return p


def _print_table(header, rows):
    print("  ".join(f"{h:>12}" for h in header))
    for row in rows:
        print("  ".join(f"{v:>12.4g}" if isinstance(v, float) else f"{str(v):>12}" for v in row))


def _run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    out = harness.output_dir(cfg, args.output_dir)
    if args.command == "sysid-check":
        sel, rows = harness.run_sysid_check(cfg, out)
        _print_table(["q", "residual", "ratio", "rank", "n_x", "sufficient"], rows)
        print(f"recommended q = {sel.q}" + (" (fallback to q_max)" if sel.fallback else ""))
        return EXIT_OK
    if args.command == "train":
        res = harness.run_train(cfg, out)
        traj = res.trajectory
        print(f"{res.reason} after {res.iterations} iterations; cost {traj.cost:.6g}")
        print(f"terminal output {np.array2string(traj.outputs[-1], precision=4)}")
        if not np.isfinite(traj.cost):
            print("optimisation produced a non-finite cost", file=sys.stderr)
            return EXIT_NUMERICAL
        return EXIT_OK
    if args.command == "synthesize":
        pol = harness.run_synthesize(cfg, out, args.trajectory)
        print(f"policy: q={pol.q} d={pol.d} T={pol.T} -> {out / harness.POLICY_FILE}")
        return EXIT_OK
    if args.command == "evaluate":
        report = harness.run_evaluate(cfg, out, args.policy, args.plots)
        rows = [(lv.sweep, lv.process_std, lv.measurement_std, lv.open_mean, lv.closed_mean,
                 lv.open_var, lv.closed_var, lv.closed_success) for lv in report.levels]
        _print_table(["sweep", "process", "measurement", "open_mean", "closed_mean",
                      "open_var", "closed_var", "cl_success"], rows)
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, ArtifactError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackwardPassError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

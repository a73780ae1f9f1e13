"""Command line entry point: ``tilp run | suite | check``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import ConfigError, load_config
from .harness import POLICY_KINDS, EpisodeError, PolicySpec, run_episode, run_suite, write_report


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tilp", description="Twin-guided planning for federated split learning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log calibration and update incidents")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one seeded episode")
    run.add_argument("--config", required=True, type=Path, help="key=value config file")
    run.add_argument("--policy", required=True,
                     help=f"one of {', '.join(POLICY_KINDS)}, optionally with +flag ablations")
    run.add_argument("--seed", required=True, type=int)
    run.add_argument("--out", required=True, type=Path, help="output directory")

    suite = sub.add_parser("suite", help="run every entry of a JSON manifest")
    suite.add_argument("--manifest", required=True, type=Path)
    suite.add_argument("--out", required=True, type=Path)
    suite.add_argument("--overwrite", action="store_true", help="allow a non-empty output directory")

    check = sub.add_parser("check", help="validate a config file without running")
    check.add_argument("--config", required=True, type=Path)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check":
            cfg = load_config(args.config)
            print(f"ok: {args.config} ({cfg.n_terminals} terminals, {cfg.n_rounds} rounds)")
        elif args.command == "run":
            if args.seed < 0:
                raise ValueError("seed must be non-negative")
            cfg = load_config(args.config)
            spec = PolicySpec.parse(args.policy)
            plan_log, cal_log = [], []
            report = run_episode(cfg, spec, args.seed, plan_log=plan_log, cal_log=cal_log)
            args.out.mkdir(parents=True, exist_ok=True)
            write_report(report, args.out / f"{spec.label}_seed{args.seed}", plan_log=plan_log, cal_log=cal_log)
            print(json.dumps(report.summary(), sort_keys=True))
        else:
            out = run_suite(args.manifest, args.out, overwrite=args.overwrite)
            print(f"results in {out}")
    except (ConfigError, ValueError, FileNotFoundError, FileExistsError, EpisodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

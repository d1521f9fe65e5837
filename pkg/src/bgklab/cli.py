"""Command line entry point: ``bgklab run <config>`` and ``bgklab validate <config>``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness


def _parser():
    p = argparse.ArgumentParser(prog="bgklab", description="Particle and kinetic alignment experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment and write its artifacts")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--out-dir", default=None, help="override the output directory")
    r.add_argument("--threads", type=int, default=1, help="worker processes for replica jobs")
    r.add_argument("--budget-seconds", type=float, default=None, help="abort with exit code 3 past this wall time")
    v = sub.add_parser("validate", help="check a config and print diagnostics")
    v.add_argument("config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = harness.load_config(args.config)
        if args.command == "validate":
            diags = harness.validate(raw)
            for d in diags:
                print(d)
            errors = [d for d in diags if d.level == "error"]
            if not errors:
                print("config ok")
            return harness.EXIT_CONFIG if errors else harness.EXIT_OK
        res = harness.run(raw, seed=args.seed, out_dir=args.out_dir, threads=args.threads, budget_seconds=args.budget_seconds)
        print(f"{res.experiment}: wrote {res.out_dir} (content hash {res.manifest['content_hash'][:16]})")
        return harness.EXIT_OK
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    except harness.InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return harness.EXIT_INVARIANT
    except harness.BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return harness.EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())

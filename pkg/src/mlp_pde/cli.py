"""``mlp-pde`` command line."""

from __future__ import annotations

import argparse
import inspect
import logging
import sys

from .harness import ConfigError, load_config, run
from .problem import BUILTIN_PROBLEMS


_DESCRIPTIONS = {
    "heat-quadratic": "backward heat equation, g = |x|^2, closed form",
    "heat-cosine": "backward heat equation, g = cos(sum x), closed form",
    "manufactured-grad": "gradient-dependent f with solution exp(kappa (T-t)) cos(sum x)",
    "heat-cosine-nlsigma": "cosine data, sigma = diag(1 + a sin x), no closed form",
    "zero": "g = 0, f = 0",
}


def _cmd_problems(_args) -> int:
    for pid, factory in BUILTIN_PROBLEMS.items():
        params = {k: v.default for k, v in inspect.signature(factory).parameters.items()}
        text = ", ".join(f"{k}={v}" for k, v in params.items())
        print(f"{pid:20s} {_DESCRIPTIONS.get(pid, ''):64s} [{text}]")
    return 0


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.out_dir or "."
    try:
        result = run(cfg, threads=args.threads, out_dir=out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    for name, ok, detail in result.checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    print(f"wrote {out_dir}/results.csv and {out_dir}/run.json "
          f"({len(result.records)} records, {result.failures} estimator failures)")
    if result.failures:
        return 1
    if args.assert_ and not all(ok for _, ok, _ in result.checks):
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mlp-pde", description="Multilevel Picard experiments")
    ap.add_argument("-v", "--verbose", action="store_true", help="log one line per record")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config (TOML or JSON)")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=None, help="overrides the config seed (default 0)")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit nonzero when an acceptance check fails")
    r.add_argument("--out-dir", default=None)
    r.set_defaults(func=_cmd_run)
    p = sub.add_parser("problems", help="list built-in problems")
    p.set_defaults(func=_cmd_problems)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

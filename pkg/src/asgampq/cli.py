"""Command-line entry point.

    asgampq [--seed N] [--out-dir DIR] search <config.json>
    asgampq finetune <config.json> <policy.json>
    asgampq transfer <config.json>
    asgampq sharpness <config.json> <checkpoint>
    asgampq probe <landscape-id> --rho R --out t.csv
    asgampq rho-curve --phi 0.5 1.0 --rho-max 0.3 --out rho.csv

Exit codes: 0 success, 1 usage/config error, 2 numeric failure.
``ASGA_OUT_DIR`` overrides ``--out-dir``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import load_config
from .errors import ConfigError, ContractError, FormatError, NumericError
from .sharpness import get_landscape, landscape_probe, write_probe_csv
from .supernet import MpqPolicy

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="run seed (unsigned integer)")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="asgampq", parents=[common],
                description="Sharpness-aware mixed-precision quantization search.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("search", parents=[common], help="search a policy on the proxy data")
    s.add_argument("config")
    s.add_argument("--method", choices=harness.METHODS, default="asga")

    f = sub.add_parser("finetune", parents=[common], help="finetune a policy on the target data")
    f.add_argument("config")
    f.add_argument("policy")

    t = sub.add_parser("transfer", parents=[common], help="search + finetune for every method")
    t.add_argument("config")
    t.add_argument("--jobs", type=int, default=1)

    h = sub.add_parser("sharpness", parents=[common], help="sharpness report for a checkpoint")
    h.add_argument("config")
    h.add_argument("checkpoint")
    h.add_argument("--power-iters", type=int, default=None)

    pr = sub.add_parser("probe", parents=[common], help="dense-grid sharpness probe of a landscape")
    pr.add_argument("landscape")
    pr.add_argument("--rho", type=float, nargs="+", required=True)
    pr.add_argument("--out", required=True)

    rc = sub.add_parser("rho-curve", parents=[common], help="adaptive rho curves")
    rc.add_argument("--phi", type=float, nargs="+", required=True)
    rc.add_argument("--rho-max", type=float, nargs="+", required=True)
    rc.add_argument("--h", type=float, nargs="+", default=None,
                    help="surrogate-gap grid (default: 200 log-spaced points in [1e-3, 10])")
    rc.add_argument("--out", required=True)
    return p


def _out_dir(args, config=None) -> Path:
    env = os.environ.get("ASGA_OUT_DIR")
    if env:
        return Path(env)
    if getattr(args, "out_dir", None):
        return Path(args.out_dir)
    return Path(config.output_dir if config is not None else ".")


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed, seeds=None)
    return cfg


def _run(args) -> int:
    cmd = args.command
    if cmd == "search":
        cfg = _config(args)
        res = harness.run_search(cfg, args.method, out_dir=_out_dir(args, cfg))
        print(res.policy.to_json(), end="")
    elif cmd == "finetune":
        cfg = _config(args)
        policy = MpqPolicy.load(args.policy)
        res = harness.run_finetune(policy, cfg, out_dir=_out_dir(args, cfg))
        print(json.dumps({"target_accuracy": res.accuracy}))
    elif cmd == "transfer":
        cfg = _config(args)
        summary = harness.run_transfer(cfg, out_dir=_out_dir(args, cfg), jobs=args.jobs)
        print(json.dumps({m: {k: v for k, v in d.items() if k != "runs"}
                          for m, d in summary["methods"].items()}, indent=2, sort_keys=True))
    elif cmd == "sharpness":
        cfg = _config(args)
        rep = harness.checkpoint_sharpness(cfg, args.checkpoint, power_iters=args.power_iters)
        out = _out_dir(args, cfg)
        out.mkdir(parents=True, exist_ok=True)
        text = json.dumps(rep.to_dict(), indent=2) + "\n"
        (out / "sharpness.json").write_text(text)
        print(text, end="")
    elif cmd == "probe":
        ls = get_landscape(args.landscape)
        rows = landscape_probe(ls.f, ls.default_grid(), args.rho)
        write_probe_csv(rows, _resolve(args, args.out))
    elif cmd == "rho-curve":
        h = args.h if args.h is not None else list(np.geomspace(1e-3, 10.0, 200))
        harness.emit_rho_curve(args.phi, args.rho_max, h, _resolve(args, args.out))
    else:
        raise UsageError("missing command")
    return EXIT_OK


def _resolve(args, path) -> Path:
    p = Path(path)
    if p.is_absolute() or not (os.environ.get("ASGA_OUT_DIR") or getattr(args, "out_dir", None)):
        return p
    d = _out_dir(args)
    d.mkdir(parents=True, exist_ok=True)
    return d / p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, FormatError, FileNotFoundError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from . import experiment
from .config import ConfigError, load_config
from .errors import PglaError

STAGES = ("simulate", "harvest", "train-diffusion", "denoise", "invert", "pipeline", "eval", "selftest")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgla", description="Gradient leakage testbed under perturbation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--trials", type=int, help="override the number of trials")
        p.add_argument("--force", action="store_true", help="accept artifacts from a different config")
        p.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
        if name == "eval":
            p.add_argument("--recovered", help="compare this gradient file ...")
            p.add_argument("--clean", help="... against this one instead of the run directory")
    return parser


def _set_threads() -> None:
    threads = os.environ.get("PGLA_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))


def _error_record(exc: BaseException, code: int) -> dict:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ConfigError):
        record["fields"] = [{"field": f, "message": m} for f, m in exc.issues]
    return record


def _dispatch(args) -> dict:
    if args.command == "selftest":
        from .selftest import run_selftest

        results = run_selftest()
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not all(ok for _, ok, _ in results):
            raise PglaError("selftest failed")
        return {"selftest": "passed"}
    if args.command == "eval" and (args.recovered or args.clean):
        if not (args.recovered and args.clean):
            raise ConfigError([("--recovered/--clean", "give both files")])
        reports = experiment.eval_files(args.recovered, args.clean, args.force)
        rows = [{"trial": r.trial, "cos_g": r.cos_g, "psnr_g": r.psnr_g} for r in reports]
        return {"results": rows}

    cfg = load_config(args.config, seed=args.seed, trials=args.trials, output_dir=args.out)
    if args.command == "pipeline":
        return experiment.run_pipeline(cfg, cfg.output_dir, args.force)
    stage = experiment.Stage(cfg, cfg.output_dir, args.force)
    started = time.perf_counter()
    if args.command == "simulate":
        experiment.simulate(stage)
    elif args.command == "harvest":
        experiment.harvest(stage)
    elif args.command == "train-diffusion":
        experiment.train_diffusion(stage)
    elif args.command == "denoise":
        experiment.denoise(stage)
    elif args.command == "invert":
        experiment.invert(stage)
    elif args.command == "eval":
        return experiment.evaluate(stage, started)
    return {"stage": args.command, "out": str(stage.out), "seconds": time.perf_counter() - started}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    _set_threads()
    try:
        result = _dispatch(args)
    except PglaError as exc:
        record = _error_record(exc, exc.code)
        print(json.dumps(record), file=sys.stderr)
        return exc.code
    except (OSError, ValueError) as exc:
        record = _error_record(exc, 1)
        print(json.dumps(record), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

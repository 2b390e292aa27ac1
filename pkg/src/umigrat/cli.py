"""Command-line front end for the experiment pipeline.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from umigrat import __version__
from umigrat.config import METHODS, REPORTS, ConfigError, ExperimentConfig, load_config, override
from umigrat.runner import Runner, StageError

SEED_ENV = "UMIGRAT_SEED"
EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("umigrat")


def _methods(text):
    parts = tuple(p.strip() for p in text.split(",") if p.strip())
    bad = [p for p in parts if p not in METHODS]
    if bad or not parts:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="experiment INI file (defaults apply when omitted)")
    common.add_argument("--output", help="output directory (overrides [experiment] output)")
    common.add_argument("--seed", type=int, help=f"master seed (overrides ${SEED_ENV} and the config)")
    common.add_argument("--replicates", type=int, help="number of replicate seeds")
    common.add_argument("--quiet", "-q", action="store_true")

    budget = argparse.ArgumentParser(add_help=False)
    budget.add_argument("--eps255", type=float, help="l-inf radius in 0-255 units")
    budget.add_argument("--alpha255", type=float, help="step size in 0-255 units")
    budget.add_argument("--iters", type=int, help="attack iterations")

    parser = argparse.ArgumentParser(prog="umigrat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-data", parents=[common], help="generate natural, downstream and eval datasets")
    sub.add_parser("build-foundation", parents=[common], help="train the surrogate encoder")
    sub.add_parser("derive-victims", parents=[common], help="derive fine-tuned victim encoders")
    p = sub.add_parser("umi-train", parents=[common, budget], help="learn the universal meta-initialization")
    p.add_argument("--rounds", type=int, help="meta-rounds")
    p.add_argument("--eta", type=float, help="Reptile step size")
    p = sub.add_parser("attack", parents=[common, budget], help="run attacks on the evaluation inputs")
    p.add_argument("--method", type=_methods, help=f"comma-separated subset of {', '.join(METHODS)}")
    p.add_argument("--sigma", type=float, help="noise scale of the gradient-robust loss")
    p = sub.add_parser("analyze", parents=[common], help="write per-input analysis reports")
    p.add_argument("what", choices=REPORTS)
    p = sub.add_parser("report", parents=[common], help="print the transfer table or the summary")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", help="write to this file instead of stdout")
    p = sub.add_parser("run", parents=[common, budget], help="run every stage and every report")
    p.add_argument("--method", type=_methods)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    notice = log.warning
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and args.seed is None:
        try:
            override(cfg, "experiment", "seed", int(env_seed), notice) if cfg.experiment.seed is not None \
                else setattr(cfg.experiment, "seed", int(env_seed))
        except ValueError:
            raise ConfigError(f"${SEED_ENV} is not an integer: {env_seed!r}") from None
    if args.seed is not None:
        if cfg.experiment.seed is None:
            cfg.experiment.seed = args.seed
        else:
            override(cfg, "experiment", "seed", args.seed, notice)
    if cfg.experiment.seed is None:
        raise ConfigError(f"no seed: set [experiment] seed, ${SEED_ENV} or --seed")
    flags = [("output", "experiment", "output"), ("replicates", "experiment", "replicates"),
             ("eps255", "attack", "eps255"), ("alpha255", "attack", "alpha255"), ("iters", "attack", "iters"),
             ("sigma", "attack", "sigma"), ("method", "attack", "methods"),
             ("rounds", "umi", "rounds"), ("eta", "umi", "eta")]
    for attr, section, key in flags:
        value = getattr(args, attr, None)
        if value is not None:
            override(cfg, section, key, value, notice)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    runner = Runner(cfg, log=log.info)
    try:
        if args.command == "analyze":
            runner.analyze([args.what])
        elif args.command == "report":
            return _report(runner, args)
        elif args.command == "run":
            runner.run("analyze")
        else:
            runner.run(args.command)
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    computed = sum(1 for s in runner.status.values() if s == "computed")
    log.info("done: %d stage(s) computed, %d cached; outputs in %s", computed,
             len(runner.status) - computed, runner.root)
    return EXIT_OK


def _report(runner: Runner, args) -> int:
    try:
        runner.analyze(["transfer"] if args.format == "csv" else None)
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    src = runner.report_path("transfer") if args.format == "csv" else runner.root / "reports" / "summary.json"
    content = Path(src).read_bytes()
    if args.out:
        Path(args.out).write_bytes(content)
    else:
        sys.stdout.write(content.decode("utf-8"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

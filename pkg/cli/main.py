"""Command-line entry point for training, sampling, estimation and benchmarks.

Usage:
    python -m cli.main train --config run.json
    python -m cli.main sample --config run.json --checkpoint runs/gmm/checkpoint.bin
    python -m cli.main benchmark --scenario gmm_table2 --out runs/bench
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Any, Callable, Dict, Mapping, Optional, Sequence

import torch

from benchmarks import SCENARIO_IDS
from errors import EXIT_OK, exit_code_for
from settings import RunConfig, configure_logging, load_settings

from . import services

logger = logging.getLogger(__name__)

Service = Callable[[RunConfig], Dict[str, Any]]


def _prepare(config_path: Optional[str], overrides: Optional[Mapping[str, Any]]) -> RunConfig:
    settings = load_settings(config_path, overrides)
    configure_logging(settings.log_level, settings.log_file)
    if settings.threads is not None:
        torch.set_num_threads(settings.threads)
    torch.use_deterministic_algorithms(True)
    return settings


def _execute(command: str, service: Service, config_path: Optional[str], overrides: Optional[Mapping[str, Any]]) -> int:
    try:
        settings = _prepare(config_path, overrides)
        summary = service(settings)
    except Exception as exc:
        logger.exception("%s failed", command)
        return exit_code_for(exc)
    logger.info("%s finished: %s", command, summary)
    return EXIT_OK


def cmd_train(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> int:
    return _execute("train", services.train_run, config_path, overrides)


def cmd_sample(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> int:
    return _execute("sample", services.sample_run, config_path, overrides)


def cmd_estimate_logz(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> int:
    return _execute("estimate-logz", services.estimate_logz_run, config_path, overrides)


def cmd_moments(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> int:
    return _execute("moments", services.moments_run, config_path, overrides)


def cmd_langevin(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> int:
    return _execute("langevin", services.langevin_run, config_path, overrides)


def cmd_benchmark(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> int:
    return _execute("benchmark", services.benchmark_run, config_path, overrides)


def cmd_kde(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> int:
    return _execute("kde", services.kde_run, config_path, overrides)


COMMANDS: Dict[str, Callable[..., int]] = {
    "train": cmd_train,
    "sample": cmd_sample,
    "estimate-logz": cmd_estimate_logz,
    "moments": cmd_moments,
    "langevin": cmd_langevin,
    "benchmark": cmd_benchmark,
    "kde": cmd_kde,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON settings file merged over the defaults")
    common.add_argument("--seed", type=int, help="Global seed")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--threads", type=int, help="Cap on torch worker threads")
    common.add_argument("--checkpoint", help="Checkpoint read by sample / estimate commands")
    common.add_argument("--scenario", choices=SCENARIO_IDS, help="Benchmark scenario")
    common.add_argument("--log-level", help="Log level (DEBUG, INFO, WARNING, ERROR)")

    parser = argparse.ArgumentParser(description="Finite-time diffusion sampler trained through FBSDE residuals")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        subparsers.add_parser(name, parents=[common])
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for flag, key in (("seed", "seed"), ("out", "out_dir"), ("threads", "threads"), ("checkpoint", "checkpoint"), ("log_level", "log_level")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "scenario", None):
        overrides["benchmark"] = {"scenario": args.scenario}
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args.config, overrides_from_args(args))


if __name__ == "__main__":
    sys.exit(main())

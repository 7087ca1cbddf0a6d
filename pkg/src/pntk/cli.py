"""Command line entry point: ``pntk <experiment> --config PATH [--seed-offset N] [--scale F] [--out DIR]``.

Exit codes: 0 on success, 2 on a configuration error, 3 on a numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .errors import ConfigError, NumericFailure
from .experiments import EXPERIMENTS, ExperimentConfig, default_config_dict, run, scaled

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("pntk")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pntk", description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", help="JSON config; omitted keys take the experiment defaults")
    p.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
    p.add_argument("--scale", type=float, default=1.0, help="rescales epoch counts and schedules")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--workers", type=int, help="worker processes (overrides the config)")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return p


def load_config(args) -> ExperimentConfig:
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        cfg = ExperimentConfig.from_json(text)
    else:
        cfg = ExperimentConfig.from_dict(default_config_dict(args.experiment))
    if cfg.experiment != args.experiment:
        raise ConfigError(f"config is for {cfg.experiment!r}, not {args.experiment!r}")
    if args.seed_offset < 0:
        raise ConfigError("--seed-offset must be non-negative")
    changes = {"seeds": [s + args.seed_offset for s in cfg.seeds]}
    if args.out:
        changes["out_dir"] = args.out
    if args.workers is not None:
        changes["workers"] = args.workers
    cfg = scaled(dataclasses.replace(cfg, **changes), args.scale)
    return ExperimentConfig.from_dict(dataclasses.asdict(cfg))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.print_config:
            print(cfg.to_json())
            return EXIT_OK
        summary = run(cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericFailure, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    headline = {k: v for k, v in summary.items() if not isinstance(v, (dict, list))}
    log.info("wrote %s", cfg.out_dir)
    if headline:
        log.info(json.dumps(headline, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

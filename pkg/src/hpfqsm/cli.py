"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import harness
from .config import ConfigError, ExperimentConfig, load_config, parse_fraction

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

COMMANDS = {
    "phantom": lambda cfg, out, args: harness.cmd_phantom(cfg, out),
    "train": lambda cfg, out, args: harness.cmd_train(cfg, out),
    "eval": lambda cfg, out, args: harness.cmd_eval(cfg, out, jobs=args.jobs, fc=args.fc),
    "sweep-fc": lambda cfg, out, args: harness.cmd_sweep_fc(cfg, out, jobs=args.jobs, beta_at_320=args.beta),
    "sweep-voxel": lambda cfg, out, args: harness.cmd_sweep_voxel(cfg, out, jobs=args.jobs),
    "metrics": lambda cfg, out, args: harness.cmd_metrics(cfg, out),
    "report": lambda cfg, out, args: harness.cmd_report(cfg, out),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hpfqsm", description="QSM from high-pass filtered phase: phantoms, training, FINE, sweeps.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="TOML experiment config")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--seed", type=int, help="override every seed in the config")
        s.add_argument("--jobs", type=int, default=1, help="parallel test cases")
        if name == "eval":
            s.add_argument("--fc", type=str, help="test HPFP cutoff, e.g. 3/8 (default: dataset fc)")
        if name == "sweep-fc":
            s.add_argument("--beta", type=float, help="mismatched Hann passband constant for the test HPFP")
    return p


def apply_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return dataclasses.replace(
        cfg,
        dataset=dataclasses.replace(cfg.dataset, seed=seed),
        network=dataclasses.replace(cfg.network, seed=seed),
        training=dataclasses.replace(cfg.training, seed=seed),
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = apply_seed(cfg, args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if getattr(args, "fc", None) is not None:
            args.fc = parse_fraction(args.fc)
            if not 0 < args.fc <= 1:
                raise ConfigError("--fc must lie in (0, 1]")
    except ConfigError as e:
        print(f"hpfqsm: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    out = args.out or cfg.output
    try:
        COMMANDS[args.command](cfg, out, args)
    except ConfigError as e:
        print(f"hpfqsm: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - every failure maps to exit code 2
        logging.getLogger("hpfqsm").debug("command failed", exc_info=True)
        print(f"hpfqsm {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

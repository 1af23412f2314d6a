"""``csa`` command line: run experiments from a JSON config.

Exit codes: 0 success, 2 bad config or dataset, 3 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .experiments import COMMANDS, ConfigError, ExperimentConfig, cmd_sweep_lambda
from .graph import GraphFormatError
from .training import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csa", description="GAT training with causal attention supervision.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "train each configured variant and write summary.json",
        "sweep-lambda": "accuracy as a function of the supervision weight",
        "robustness": "accuracy under feature and edge perturbation",
        "mad": "per-epoch mean average distance of output representations",
        "attn-quality": "attention mass on informative edges of a planted graph",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides CSA_OUT and the config)")
        p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
        if name == "sweep-lambda":
            p.add_argument("--values", type=_float_list, help="comma-separated lambdas (default: from config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.command == "sweep-lambda":
            result = cmd_sweep_lambda(cfg, args.values, args.out)
            print(f"argmax lambda = {result['argmax_lambda']:g} (mean acc {result['best_mean_acc']:.2f})")
        else:
            COMMANDS[args.command](cfg, args.out)
        print(f"wrote results to {cfg.output_path(args.out)}")
    except (ConfigError, GraphFormatError, FileNotFoundError) as exc:
        print(f"csa: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"csa: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``moc2her train ...``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .trainer import ALGOS, HER_VARIANTS, ConfigError, ExperimentConfig, read_config_file, run_experiment

# flag dest -> ExperimentConfig field
FLAG_FIELDS = {
    "env": "env", "algo": "algo", "her": "her", "options": "n_options",
    "iterations": "n_iterations", "steps": "steps_per_iteration", "seed": "seed", "out": "out",
    "k": "k0", "k_decay": "k_decay_interval", "cr": "c_r", "disable_2her": "disable_2her_at",
    "entropy": "entropy_coef", "minibatch": "minibatch_size", "gamma": "gamma",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="moc2her")
    sub = parser.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="run one seeded experiment")
    t.add_argument("--env", help="point-reach or point-push")
    t.add_argument("--algo", choices=ALGOS)
    t.add_argument("--her", choices=HER_VARIANTS)
    t.add_argument("--options", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--steps", type=int, help="environment steps per iteration")
    t.add_argument("--seed", type=int)
    t.add_argument("--config", help="key = value file; flags override it")
    t.add_argument("--out", help="output directory")
    t.add_argument("--k", type=int, help="initial relabels per transition")
    t.add_argument("--k-decay", type=int, help="iterations between k decrements")
    t.add_argument("--cr", type=float, help="object-reward weight of the dual reward")
    t.add_argument("--2her-disable", dest="disable_2her", type=int,
                   help="iteration at which 2her falls back to her")
    t.add_argument("--entropy", type=float)
    t.add_argument("--lr", type=float, help="one learning rate for all four heads")
    t.add_argument("--gamma", type=float)
    t.add_argument("--minibatch", type=int)
    t.add_argument("--single-option", action="store_true", default=None,
                   help="update only the executed option")
    t.add_argument("-q", "--quiet", action="store_true")
    return parser


def config_from_args(args):
    values = read_config_file(args.config) if args.config else {}
    for flag, name in FLAG_FIELDS.items():
        v = getattr(args, flag)
        if v is not None:
            values[name] = v
    if args.lr is not None:
        for name in ("lr_critic", "lr_policy", "lr_termination", "lr_meta"):
            values[name] = args.lr
    if args.single_option:
        values["single_option"] = True
    return dataclasses.replace(ExperimentConfig(), **values)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s")
    try:
        config = config_from_args(args)
        exp = run_experiment(config)
    except ConfigError as exc:
        print(f"moc2her: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"moc2her: {exc}", file=sys.stderr)
        return 1
    last = exp.history[-1].success_rate if exp.history else float("nan")
    print(f"done: {len(exp.history)} iterations, final success {last:.3f}, "
          f"outputs in {exp.config.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Command line entry point.

    python -m experiment_control.hebbseed fetch cifar10 --dir data
    python -m experiment_control.hebbseed pretrain --config experiment_control/desk_scale.env --seed 0 --out ckpt
    python -m experiment_control.hebbseed train --method hpca --probe L3 --regime 5 --ckpt ckpt
    python -m experiment_control.hebbseed sweep --config experiment_control/desk_scale.env
    python -m experiment_control.hebbseed verify-oracle
    python -m experiment_control.hebbseed report --runs runs/desk
"""

from __future__ import annotations

import argparse
import sys

from experiment_control import experiment, results
from experiment_control.datasets import ARCHIVES, fetch_dataset
from experiment_control.verify_oracle import verify_oracle
from hebbian_engine.network import FINAL_PROBE, PROBE_NAMES

# command line spelling -> method name used in configs and tables
METHOD_NAMES = {"bp": "BP", "hpca": "HPCA", "hpca-ft": "HPCA_FT"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hebbseed",
        description="Hebbian PCA pre-training and semi-supervised evaluation",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    fetch = commands.add_parser("fetch", help="Download and extract a dataset")
    fetch.add_argument("dataset", choices=sorted(ARCHIVES))
    fetch.add_argument("--dir", default="data", help="Directory to extract to")
    fetch.add_argument("--sha256", default=None, help="Expected SHA-256 of the archive")
    fetch.add_argument("--url", default=None, help="Alternative download URL")

    config_help = "Config file(s), later files override earlier ones"

    pretrain = commands.add_parser("pretrain", help="Hebbian pre-training of one seed")
    pretrain.add_argument("--config", nargs="*", default=[], help=config_help)
    pretrain.add_argument("--seed", type=int, default=0)
    pretrain.add_argument("--out", required=True, help="Checkpoint path")

    train = commands.add_parser("train", help="Train and test one probe")
    train.add_argument("--config", nargs="*", default=[], help=config_help)
    train.add_argument("--method", choices=sorted(METHOD_NAMES), required=True)
    train.add_argument("--probe", choices=[*PROBE_NAMES, FINAL_PROBE], default=FINAL_PROBE)
    train.add_argument("--regime", type=float, default=100.0, help="Labeled percentage r")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--ckpt", default=None, help="Hebbian checkpoint (HPCA methods)")

    sweep = commands.add_parser("sweep", help="Run every seed x regime x method cell")
    sweep.add_argument("--config", nargs="*", default=[], help=config_help)

    commands.add_parser("verify-oracle", help="Check the Hebbian rules against exact references")

    report = commands.add_parser("report", help="Aggregate one or more sweep directories")
    report.add_argument("--runs", nargs="+", required=True)
    report.add_argument("--out", default=None, help="Output directory (default: first run dir)")
    report.add_argument(
        "--check-acceptance",
        action="store_true",
        help="Fail unless the desk-scale method orderings hold",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "fetch":
        fetch_dataset(args.dataset, args.dir, args.sha256, args.url)
    elif args.command == "pretrain":
        experiment.pretrain_flow(args.config, args.seed, args.out)
    elif args.command == "train":
        experiment.train_flow(
            args.config, METHOD_NAMES[args.method], args.probe, args.regime, args.seed, args.ckpt
        )
    elif args.command == "sweep":
        experiment.run_sweep_flow(args.config)
    elif args.command == "verify-oracle":
        checks = verify_oracle()
        if not all(check.passed for check in checks):
            return 1
    elif args.command == "report":
        results.report_flow(args.runs, args.out, args.check_acceptance)
    return 0


if __name__ == "__main__":
    sys.exit(main())

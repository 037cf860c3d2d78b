"""rrlab entry point: python -m rrlab"""

import logging
import sys
from pathlib import Path

from rrlab import __version__
from rrlab.config import REJECTORS
from rrlab.seeding import configure_threads

log = logging.getLogger("rrlab")


def _add_common(parser, out_help: str = "Output directory"):
    parser.add_argument("-o", "--out", type=Path, required=True, help=out_help)
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override a config key, e.g. train.epochs=5 (repeatable)",
    )


def _add_inputs(parser):
    parser.add_argument("--checkpoint", type=Path, required=True, help="Checkpoint file")
    parser.add_argument("--dataset", type=Path, required=True, help="Feature CSV")


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(prog="rrlab", description="Rectified rejection lab")
    parser.add_argument("--version", action="version", version=f"rrlab {__version__}")
    parser.add_argument("--log-level", default="info", help="Log level")
    sub = parser.add_subparsers(dest="command", required=True)

    train_parser = sub.add_parser("train", help="Adversarially train a two-head network")
    train_parser.add_argument("config", type=Path, help="Config file (section.key=value lines)")
    _add_common(train_parser)

    eval_parser = sub.add_parser("eval", help="Score a dataset with the rejectors")
    _add_inputs(eval_parser)
    eval_parser.add_argument("--attack-config", type=Path, help="Attack the dataset first with this config")
    eval_parser.add_argument("--rejector", action="append", choices=REJECTORS, help="Rejector (repeatable)")
    eval_parser.add_argument("--tpr", type=float, help="TPR level for the threshold (default eval.tpr)")
    eval_parser.add_argument(
        "--tau-sweep", action="store_true", help="Also write per-temperature reports and tau_summary.csv"
    )
    eval_parser.add_argument("--threshold-from", type=Path, help="Reuse thresholds from a previous eval directory")
    eval_parser.add_argument("--emit-gnuplot", action="store_true", help="Write .gp scripts beside curve CSVs")
    _add_common(eval_parser)

    tau_parser = sub.add_parser("sweep-tau", help="Rejection statistics over a temperature grid")
    _add_inputs(tau_parser)
    tau_parser.add_argument("-c", "--config", type=Path, help="Config file")
    tau_parser.add_argument("--emit-gnuplot", action="store_true", help="Write a .gp script")
    _add_common(tau_parser)

    attack_parser = sub.add_parser("attack", help="Attack a dataset and export per-example results")
    _add_inputs(attack_parser)
    attack_parser.add_argument("--attack-config", type=Path, help="Config file")
    attack_parser.add_argument(
        "--mode", choices=("normal", "adaptive", "min-distortion", "sweep"), default="normal", help="Attack mode"
    )
    attack_parser.add_argument(
        "--threshold", type=float, help="R-Con acceptance threshold (default: fixed on clean inputs)"
    )
    _add_common(attack_parser)

    verify_parser = sub.add_parser("verify", help="Check the separability results on sampled instances")
    verify_parser.add_argument("--trials", type=int, default=100_000, help="Trials per branch")
    verify_parser.add_argument("--seed", type=int, default=0, help="Master seed")
    verify_parser.add_argument("--inject-fault", action="store_true", help="Flip an inequality (self-test)")
    verify_parser.add_argument("-o", "--out", type=Path, required=True, help="Output directory")

    data_parser = sub.add_parser("gen-data", help="Write the configured dataset as CSV")
    data_parser.add_argument("config", type=Path, help="Config file")
    _add_common(data_parser, out_help="Output CSV file")

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)

    level = getattr(logging, args.log_level.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(name)-25s %(levelname)-7s %(message)s",
        datefmt="%H:%M:%S",
    )
    configure_threads()
    log.debug("rrlab v%s: %s", __version__, args.command)

    from rrlab.cli import run_command
    sys.exit(run_command(args))


if __name__ == "__main__":
    main()

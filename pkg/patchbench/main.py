"""
Entry point του patchbench CLI.

Αυτό το αρχείο είναι υπεύθυνο μόνο για:
1. Τον ορισμό των subcommands και των flags
2. Τη ρύθμιση του logging
3. Την κλήση του handler (commands.py) και το exit code

Η πραγματική λογική βρίσκεται στα *_service modules.
"""

import argparse
import logging
import sys
from typing import List, Optional

from . import __version__
from .commands import (
    cmd_adapters,
    cmd_analyze_hist,
    cmd_analyze_tsne,
    cmd_baseline,
    cmd_check,
    cmd_eval,
    cmd_history,
    cmd_matrix,
    cmd_train,
    execute,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _float_list(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{value}'") from e


def _run_flags() -> argparse.ArgumentParser:
    """Flags κοινά σε όλες τις εντολές που διαβάζουν run config."""
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="TOML run config or manifest.json of a previous run")
    parent.add_argument("--registry", help="TOML adapter registry (default: builtin toy detectors)")
    parent.add_argument("--data", help="Dataset spec (JSON)")
    parent.add_argument("--out", help="Output directory")
    parent.add_argument("--seed", type=int, help="Global seed, overrides every sub-seed")
    parent.add_argument("--jobs", type=int, help="Parallel workers")
    parent.add_argument("--patch-size", type=int, help="Patch side in pixels")
    parent.add_argument("--placement-scale", type=float, help="Patch side as a fraction of the shorter box side")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchbench",
        description="Adversarial patch optimization, transferability evaluation and analysis",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")
    run_flags = _run_flags()

    train = commands.add_parser("train", parents=[run_flags], help="Optimize a patch set against one detector")
    train.add_argument("--adapter", required=True, help="Registry name of the target detector")
    train.add_argument("--count", type=int, default=1, help="Number of patches (seeds seed..seed+count-1)")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lambda-s", type=float, help="Smoothness weight")
    train.add_argument("--lambda-v", type=float, help="Validity weight")
    train.add_argument("--lambda-m", type=float, help="Detector loss weight")
    train.add_argument(
        "--target-class-only",
        type=int,
        nargs="?",
        const=0,
        metavar="CLASS",
        help="Class-max loss on this class only (default class 0)",
    )
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", parents=[run_flags], help="Clean vs patched mAP on one detector")
    evaluate.add_argument("--adapter", required=True)
    evaluate.add_argument("--patches", nargs="+", help="Patch directories (default: gray baselines)")
    _add_eval_flags(evaluate)
    evaluate.set_defaults(handler=cmd_eval)

    matrix = commands.add_parser("matrix", parents=[run_flags], help="Compatibility matrix of sources × evaluators")
    matrix.add_argument("--patches", nargs="+", required=True, help="Directories of optimized patches")
    matrix.add_argument("--adapter", nargs="+", help="Evaluators (default: the patch sources)")
    _add_eval_flags(matrix)
    matrix.add_argument("--noise-count", type=int, help="Noise patches in the noise column")
    matrix.set_defaults(handler=cmd_matrix)

    analyze = commands.add_parser("analyze", help="t-SNE and histogram analysis of a patch corpus")
    kinds = analyze.add_subparsers(dest="analysis", required=True, metavar="analysis")
    tsne = kinds.add_parser("tsne", parents=[run_flags], help="t-SNE embedding scatter")
    tsne.add_argument("--patches", nargs="+", required=True)
    tsne.add_argument("--records", nargs="+", help="Eval records (JSON lines) for marker sizes")
    tsne.add_argument("--perplexity", type=float)
    tsne.add_argument("--extractor", choices=["projection", "inception"])
    tsne.set_defaults(handler=cmd_analyze_tsne, command="analyze tsne")
    hist = kinds.add_parser("hist", parents=[run_flags], help="Channel histograms and statistics")
    hist.add_argument("--patches", nargs="+", required=True)
    hist.add_argument("--space", nargs="+", choices=["RGB", "HSV"], default=["RGB", "HSV"])
    hist.add_argument("--single", help="Patch id for the single-patch column")
    hist.add_argument("--source", help="Source model for the per-source column")
    hist.set_defaults(handler=cmd_analyze_hist, command="analyze hist")

    baseline = commands.add_parser("baseline", parents=[run_flags], help="Write gray and noise baseline patches")
    baseline.add_argument("--gray-levels", type=_float_list)
    baseline.add_argument("--noise-count", type=int)
    baseline.set_defaults(handler=cmd_baseline)

    adapters = commands.add_parser("adapters", help="List the registry")
    adapters.add_argument("--registry")
    adapters.set_defaults(handler=cmd_adapters)

    history = commands.add_parser("history", help="Recent runs, newest first")
    history.add_argument("-n", type=int, default=10, help="How many runs (1-100)")
    history.set_defaults(handler=cmd_history)

    check = commands.add_parser("check", help="Check the environment")
    check.add_argument("--registry")
    check.set_defaults(handler=cmd_check)
    return parser


def _add_eval_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--conf", type=float, help="Confidence threshold")
    sub.add_argument("--iou", type=float, help="NMS IoU threshold")
    sub.add_argument("--gray-levels", type=_float_list, help="Comma-separated gray levels, e.g. 0,0.5,1")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    return execute(args)


if __name__ == "__main__":
    sys.exit(main())

"""
Script for computing ROC points of the scan detector on a labeled trace.

The detector runs in three modes at every threshold of the ladder:
    baseline        every failed connection counts
    predicted       failures to connections predicted by BitTorrent
                    coordination traffic are ignored
    predicted+ppr   additionally, sources with a P2P-like port/peer ratio
                    are not reported

Each threshold is a single report threshold. The true positive rate is the
share of labeled scanners reported, the false positive rate the share of
labeled BitTorrent hosts reported.

Without --input the default synthetic experiment is generated from --seed.

Output file (in the output directory):
    roc.csv     header mode,threshold,tpr,fpr; one row per mode and threshold

Examples:
    # Default experiment, default ladder 5,10,20,50,100,200,500,1000:
    bt-roc --out results

    # A recorded trace with its labels and a custom ladder:
    bt-roc --input trace.pcap --labels labels.ndjson --thresholds 10,100,1000 --out results

    # One threshold only (three rows):
    bt-roc --threshold 100 --out results
"""

import argparse
import os
import sys

from bt_scan_tools.cli import (
    EXIT_OK,
    ArgumentParser,
    RunConfig,
    add_analyzer_arguments,
    add_common_arguments,
    add_detector_arguments,
    add_input_arguments,
    atomic_write,
    configure_logging,
    load_experiment,
    run,
    threshold_list,
)
from bt_scan_tools.evaluation import DEFAULT_LADDER, prepare, roc_points, write_roc_csv


def parse_arguments(argv=None):
    """Parse the arguments for the script."""
    parser = ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_input_arguments(parser, required=False)
    parser.add_argument(
        "--labels",
        type=str,
        default=None,
        help="Labels file of the input trace (required with --input).",
    )
    parser.add_argument(
        "--thresholds",
        type=threshold_list,
        default=list(DEFAULT_LADDER),
        help=f"Comma-separated threshold ladder (default: {','.join(map(str, DEFAULT_LADDER))}).",
    )
    add_detector_arguments(parser)
    add_analyzer_arguments(parser)
    add_common_arguments(parser)
    return parser.parse_args(argv)


def roc(args) -> int:
    cfg = RunConfig.from_args(args)
    thresholds = [args.threshold] if args.threshold is not None else args.thresholds
    trace = load_experiment(cfg)
    analysis = prepare(trace, cfg.analyzer, cfg.capture)
    points = roc_points(trace, cfg.detector, thresholds, analysis=analysis)
    path = os.path.join(cfg.out, "roc.csv")
    with atomic_write(path) as f:
        write_roc_csv(points, f)
    print(f"Wrote {len(points)} ROC points to {path}")
    return EXIT_OK


def main(argv=None) -> int:
    """Main entry point for the script."""
    args = parse_arguments(argv)
    configure_logging(args.verbose)
    return run(roc, args)


if __name__ == "__main__":
    sys.exit(main())

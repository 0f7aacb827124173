"""
Script for measuring how soon flagged hosts contact their predicted peers.

For every source reported by the baseline detector (no suppression), the
script measures the time from the source's first packet to the k-th earliest
predicted connection the detector had seen when it reported the source.
Sources with fewer than k such connections are left out. The durations are
binned into a histogram; BitTorrent hosts typically fall into the first bin.

Without --input the default synthetic experiment is generated from --seed.

Output file (in the output directory):
    histogram.csv   header bin_start_seconds,count

Examples:
    # Default experiment, k=100, 15 minute bins, report threshold 100:
    bt-hist --out results

    # One minute bins:
    bt-hist --bin 60 --out results

    # A recorded trace:
    bt-hist --input trace.pcap --labels labels.ndjson --k 50 --out results
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
)
from bt_scan_tools.evaluation import (
    HISTOGRAM_THRESHOLD,
    predicted_duration_histogram,
    prepare,
    write_histogram_csv,
)


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
        "--k",
        type=int,
        default=100,
        help="Number of predicted connections to wait for (default: 100).",
    )
    parser.add_argument(
        "--bin",
        type=float,
        default=900.0,
        help="Histogram bin width in seconds (default: 900, i.e. 15 minutes).",
    )
    add_detector_arguments(parser)
    add_analyzer_arguments(parser)
    add_common_arguments(parser)
    return parser.parse_args(argv)


def histogram(args) -> int:
    cfg = RunConfig.from_args(args)
    threshold = args.threshold if args.threshold is not None else HISTOGRAM_THRESHOLD
    trace = load_experiment(cfg)
    analysis = prepare(trace, cfg.analyzer, cfg.capture)
    result = predicted_duration_histogram(
        trace, cfg.detector, k=args.k, bin=args.bin, threshold=threshold, analysis=analysis
    )
    path = os.path.join(cfg.out, "histogram.csv")
    with atomic_write(path) as f:
        write_histogram_csv(result, f)
    print(
        f"Measured {len(result.durations)} sources, "
        f"{result.first_bin_share():.0%} in the first bin; saved to {path}"
    )
    return EXIT_OK


def main(argv=None) -> int:
    """Main entry point for the script."""
    args = parse_arguments(argv)
    configure_logging(args.verbose)
    return run(histogram, args)


if __name__ == "__main__":
    sys.exit(main())

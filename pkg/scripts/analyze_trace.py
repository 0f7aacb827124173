"""
Script for finding port scanners in a packet trace without blaming BitTorrent hosts.

The trace is replayed once: connection attempts are tracked, BitTorrent
coordination traffic (HTTP and UDP trackers, Azureus and Mainline DHT, uTP
signatures, peer exchange) is decoded into predicted connections, and the scan
detector counts every source's failed connections to distinct destinations
within a sliding window. Failures to predicted destinations are ignored, and a
source whose port/peer ratio looks like P2P traffic is not reported.

Output files (in the output directory, or in <out>/<trace name>/ when several
traces are given):
    alarms.log              AddressScan, ShutdownThresh and summary alarms
    suppressed.log          SuppressedByPrediction and SuppressedByPPR alarms
    peer_mappings.ndjson    every predicted connection with its provenance
    summary.json            counts per alarm kind and per provenance
    breakdown.json          only with --labels: baseline flags split into
                            suppressed and residual ones

Alarm lines read: <ts> <kind> <source> <count> <detail>

Examples:
    # Analyze a pcap with the default settings (threshold 20 and 100, 900 s window):
    bt-analyze --input capture.pcap --out results

    # Single threshold, no port/peer ratio suppression:
    bt-analyze --input capture.pcap --out results --threshold 100 --no-ppr

    # Only use tracker analyzers on an NDJSON trace:
    bt-analyze --input trace.ndjson --format ndjson --analyzers http_tracker,udp_tracker

Exit status: 0 on success, 2 when a file cannot be read or written, 64 for
invalid arguments or settings.
"""

import argparse
import json
import os
import sys
from collections import Counter

from bt_scan_tools.analyzer import analyze_trace
from bt_scan_tools.capture import read_trace
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
    load_labels,
    run,
)
from bt_scan_tools.evaluation import flag_breakdown, write_breakdown_json
from bt_scan_tools.scandet import AlarmKind, format_alarm
from bt_scan_tools.synth import LabeledTrace


def parse_arguments(argv=None):
    """Parse the arguments for the script."""
    parser = ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_input_arguments(parser, required=True)
    add_detector_arguments(parser)
    add_analyzer_arguments(parser)
    add_common_arguments(parser)
    parser.add_argument(
        "--labels",
        type=str,
        default=None,
        help="Labels file (NDJSON lines of source and kind, as written by bt-synth). "
             "When given, breakdown.json compares baseline and suppressed flags.",
    )
    return parser.parse_args(argv)


def _output_directories(inputs: list[str], out: str) -> list[str]:
    if len(inputs) == 1:
        return [out]
    stems = [os.path.splitext(os.path.basename(path))[0] for path in inputs]
    if len(set(stems)) != len(stems):
        raise ValueError("input traces must have distinct file names")
    return [os.path.join(out, stem) for stem in stems]


def analyze(args) -> int:
    cfg = RunConfig.from_args(args)
    labels = load_labels(cfg.labels) if cfg.labels else None
    for path, out_dir in zip(cfg.inputs, _output_directories(cfg.inputs, cfg.out)):
        packets = read_trace(path, cfg.fmt)
        analysis = analyze_trace(packets, cfg.analyzer, cfg.detector, cfg.capture)

        with atomic_write(os.path.join(out_dir, "alarms.log")) as f:
            for alarm in analysis.alarms:
                if not alarm.kind.suppression:
                    f.write(format_alarm(alarm) + "\n")
        with atomic_write(os.path.join(out_dir, "suppressed.log")) as f:
            for alarm in analysis.alarms:
                if alarm.kind.suppression:
                    f.write(format_alarm(alarm) + "\n")
        with atomic_write(os.path.join(out_dir, "peer_mappings.ndjson")) as f:
            analysis.mappings.export_ndjson(f)

        kinds = Counter(alarm.kind.value for alarm in analysis.alarms)
        summary = {
            "input": path,
            "packets": analysis.packets,
            "terminal_events": len(analysis.events),
            "predicted_events": analysis.ledger.predicted_count(),
            "alarms": {kind.value: kinds.get(kind.value, 0) for kind in AlarmKind},
            "flagged_sources": sorted(analysis.flagged),
            "peer_mappings": analysis.mappings.stats().to_dict(),
        }
        with atomic_write(os.path.join(out_dir, "summary.json")) as f:
            json.dump(summary, f, indent=2)
            f.write("\n")

        if labels is not None:
            breakdown = flag_breakdown(
                LabeledTrace(packets, labels), cfg.detector, analysis=analysis
            )
            with atomic_write(os.path.join(out_dir, "breakdown.json")) as f:
                write_breakdown_json(breakdown, f)

        print(
            f"{path}: {kinds.get(AlarmKind.ADDRESS_SCAN.value, 0)} AddressScan alarms, "
            f"{kinds.get(AlarmKind.SUPPRESSED_BY_PREDICTION.value, 0)} suppressed by prediction; "
            f"results saved to {out_dir}"
        )
    return EXIT_OK


def main(argv=None) -> int:
    """Main entry point for the script."""
    args = parse_arguments(argv)
    configure_logging(args.verbose)
    return run(analyze, args)


if __name__ == "__main__":
    sys.exit(main())

"""
Script for generating a labeled synthetic trace of port scanners and BitTorrent hosts.

The default experiment has 51 scanners and 49 BitTorrent hosts, all starting at
the same time:
    - scanners cycle through horizontal (1024 addresses on one port), vertical
      (1000 ports of one address) and hybrid (256 addresses x 4 ports) geometries,
      with rates spread log-uniformly from 0.01/s to 1000/s; 95% of their SYNs
      go unanswered, the rest are reset;
    - every BitTorrent host learns 250 peers from tracker, DHT and peer-exchange
      traffic and then connects to them at 2 attempts/s; 80% of the peers are
      unconnectable.

Scanners use 10.1.0.0/16, BitTorrent hosts 10.2.0.0/16.

Output files (in the output directory):
    trace.ndjson or trace.pcap   the packets, in timestamp order
    labels.ndjson                one {"source", "kind"} line per host

Examples:
    # Default experiment as NDJSON:
    bt-synth --out data

    # Scanners only, as pcap:
    bt-synth --out data --bt-hosts 0 --format pcap

    # Other population settings:
    bt-synth --out data --config-json '{"bt_peers": 100, "unconnectable_fraction": 0.6}'

The same seed always produces byte-identical files.
"""

import argparse
import json
import os
import sys

from bt_scan_tools.capture import write_ndjson, write_pcap
from bt_scan_tools.cli import (
    EXIT_OK,
    ArgumentParser,
    add_common_arguments,
    atomic_write,
    comma_list,
    configure_logging,
    run,
)
from bt_scan_tools.synth import ExperimentConfig, write_labels


def parse_arguments(argv=None):
    """Parse the arguments for the script."""
    defaults = ExperimentConfig()
    parser = ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_common_arguments(parser)
    parser.add_argument(
        "--scanners",
        type=int,
        default=None,
        help=f"Number of port scanners (default: {defaults.scanners}).",
    )
    parser.add_argument(
        "--bt-hosts",
        type=int,
        default=None,
        help=f"Number of BitTorrent hosts (default: {defaults.bt_hosts}).",
    )
    parser.add_argument(
        "--unconnectable",
        type=float,
        default=None,
        help="Share of each BitTorrent host's peers that cannot be connected to "
             f"(default: {defaults.unconnectable_fraction}).",
    )
    parser.add_argument(
        "--mix",
        type=comma_list,
        default=None,
        help="Comma-separated coordination protocols of the BitTorrent hosts, out of "
             "http, udp_tracker, mdht, adht, pex and btudp "
             f"(default: {','.join(defaults.coordination_mix)}).",
    )
    parser.add_argument(
        "--format",
        choices=("ndjson", "pcap"),
        default="ndjson",
        help="Trace file format (default: ndjson).",
    )
    parser.add_argument(
        "--config-json",
        type=str,
        default=None,
        help="JSON object of experiment settings, applied before the flags above. "
             'Example: \'{"bt_peers": 100, "bt_rate": 5.0}\'',
    )
    return parser.parse_args(argv)


def experiment_config_from_args(args) -> ExperimentConfig:
    values = {}
    if args.config_json:
        try:
            values = json.loads(args.config_json)
        except json.JSONDecodeError as e:
            raise ValueError(f"Error parsing configuration JSON: {e}")
        if not isinstance(values, dict):
            raise ValueError("configuration JSON must be an object")
    values["seed"] = args.seed
    if args.scanners is not None:
        values["scanners"] = args.scanners
    if args.bt_hosts is not None:
        values["bt_hosts"] = args.bt_hosts
    if args.unconnectable is not None:
        values["unconnectable_fraction"] = args.unconnectable
    if args.mix is not None:
        values["coordination_mix"] = tuple(args.mix)
    try:
        return ExperimentConfig.from_dict(values)
    except TypeError as e:
        raise ValueError(f"invalid experiment settings: {e}")


def synthesize(args) -> int:
    config = experiment_config_from_args(args)
    trace = config.build()

    trace_path = os.path.join(args.out, f"trace.{args.format}")
    if args.format == "pcap":
        with atomic_write(trace_path, "wb") as f:
            write_pcap(trace.packets, f)
    else:
        with atomic_write(trace_path) as f:
            write_ndjson(trace.packets, f)
    labels_path = os.path.join(args.out, "labels.ndjson")
    with atomic_write(labels_path) as f:
        write_labels(trace.labels, f)

    print(
        f"Generated {len(trace.packets)} packets from {len(trace.labels)} hosts; "
        f"saved to {trace_path} and {labels_path}"
    )
    return EXIT_OK


def main(argv=None) -> int:
    """Main entry point for the script."""
    args = parse_arguments(argv)
    configure_logging(args.verbose)
    return run(synthesize, args)


if __name__ == "__main__":
    sys.exit(main())

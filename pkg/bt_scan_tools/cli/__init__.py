"""Plumbing shared by the command-line tools.

Exit statuses: 0 on success, 2 when an input cannot be read or an output
cannot be written, 64 for usage and configuration errors.
"""

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
import tempfile

from ..analyzer import ANALYZERS, AnalyzerConfig
from ..capture import CaptureConfig, read_trace
from ..dht import SignatureTable
from ..scandet import DetectorConfig
from ..synth import ExperimentConfig, LabeledTrace, read_labels

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 2
EXIT_USAGE = 64

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

CAPTURE_SETTINGS = frozenset(field.name for field in dataclasses.fields(CaptureConfig))


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


def run(command, args) -> int:
    """Call ``command(args)`` and map failures to exit statuses."""
    try:
        return command(args)
    except OSError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


@contextlib.contextmanager
def atomic_write(path: str, mode: str = "w"):
    """Write to a temporary file next to ``path`` and move it into place on success."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    encoding = None if "b" in mode else "utf-8"
    try:
        with os.fdopen(fd, mode, encoding=encoding, newline=None if "b" in mode else "") as f:
            yield f
        os.replace(tmp_path, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp_path)
        raise


def comma_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def threshold_list(text: str) -> list[int]:
    try:
        values = [int(item) for item in comma_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("thresholds must be positive integers")
    return values


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--verbose", "-v",
        action="store_true",
        help="Log debug messages, including every skipped frame and evicted mapping.",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=0,
        help="Seed of the synthetic experiment (default: 0). The same seed always "
             "produces the same trace and the same outputs.",
    )
    parser.add_argument(
        "--out", "-o",
        type=str,
        default=".",
        help="Output directory (default: current directory). Created if missing.",
    )


def add_input_arguments(parser: argparse.ArgumentParser, required: bool) -> None:
    parser.add_argument(
        "--input", "-i",
        action="append",
        required=required,
        help="Trace file to read; pcap (Ethernet, IPv4) or NDJSON. "
             "Can be given several times.",
    )
    parser.add_argument(
        "--format",
        choices=("auto", "pcap", "ndjson"),
        default="auto",
        help="Input format (default: auto). Auto detection looks for a pcap magic "
             "number and otherwise expects a JSON object on the first non-empty line.",
    )


def add_detector_arguments(parser: argparse.ArgumentParser, threshold: bool = True) -> None:
    defaults = DetectorConfig()
    if threshold:
        parser.add_argument(
            "--threshold",
            type=int,
            default=None,
            help="Single report threshold: the number of distinct failed destinations "
                 "within the window at which a source is reported (default: report at "
                 f"{' and '.join(map(str, defaults.report_thresholds))}).",
        )
    parser.add_argument(
        "--window",
        type=float,
        default=None,
        help=f"Sliding window in seconds (default: {defaults.window:g}).",
    )
    parser.add_argument(
        "--shutdown",
        type=int,
        default=None,
        help="Distinct failed destinations after which a source is no longer reported "
             f"on (default: {defaults.shutdown_threshold}).",
    )
    parser.add_argument(
        "--ppr-lower",
        type=float,
        default=None,
        help=f"Lower port/peer ratio bound of P2P behavior (default: {defaults.ppr_lower}).",
    )
    parser.add_argument(
        "--ppr-upper",
        type=float,
        default=None,
        help=f"Upper port/peer ratio bound of P2P behavior (default: {defaults.ppr_upper}).",
    )
    capture = CaptureConfig()
    parser.add_argument(
        "--handshake-timeout",
        type=float,
        default=None,
        help="Seconds a connection attempt may wait for its answer before it counts "
             f"as failed (default: {capture.handshake_timeout:g}).",
    )
    parser.add_argument(
        "--reorder-skew",
        type=float,
        default=None,
        help="Seconds by which packets may be out of timestamp order before other "
             f"connections time out (default: {capture.reorder_skew:g}).",
    )
    parser.add_argument(
        "--no-predicted",
        action="store_true",
        help="Count failures to destinations predicted by coordination traffic.",
    )
    parser.add_argument(
        "--no-ppr",
        action="store_true",
        help="Report sources regardless of their port/peer ratio.",
    )
    parser.add_argument(
        "--config-json",
        type=str,
        default=None,
        help='JSON object of detector and connection tracking settings applied before '
             'the flags above. Example: '
             '\'{"report_thresholds": [20, 100], "window": 600, "handshake_timeout": 20}\'',
    )


def add_analyzer_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--analyzers",
        type=comma_list,
        default=None,
        help=f"Comma-separated analyzers to run (default: all of {','.join(ANALYZERS)}).",
    )
    parser.add_argument(
        "--signatures",
        type=str,
        default=None,
        help="BTUDP signature file, one '<name> len<op><n> <hex prefix>' line per "
             "signature; ?? matches any byte (default: built-in uTP and DHT ping signatures).",
    )


def config_overrides(args) -> dict:
    """The --config-json object, or an empty one."""
    if not getattr(args, "config_json", None):
        return {}
    try:
        overrides = json.loads(args.config_json)
    except json.JSONDecodeError as e:
        raise ValueError(f"Error parsing configuration JSON: {e}")
    if not isinstance(overrides, dict):
        raise ValueError("configuration JSON must be an object")
    return overrides


def detector_config_from_args(args) -> DetectorConfig:
    cfg = DetectorConfig()
    overrides = {k: v for k, v in config_overrides(args).items() if k not in CAPTURE_SETTINGS}
    if overrides:
        try:
            cfg = DetectorConfig.from_dict(dataclasses.asdict(cfg) | overrides)
        except TypeError as e:
            raise ValueError(f"invalid detector settings: {e}")
    changes = {}
    if getattr(args, "threshold", None) is not None:
        cfg = cfg.with_threshold(args.threshold)
    if args.window is not None:
        changes["window"] = args.window
    if args.shutdown is not None:
        changes["shutdown_threshold"] = args.shutdown
    if args.ppr_lower is not None:
        changes["ppr_lower"] = args.ppr_lower
    if args.ppr_upper is not None:
        changes["ppr_upper"] = args.ppr_upper
    if args.no_predicted:
        changes["suppress_predicted"] = False
    if args.no_ppr:
        changes["suppress_ppr"] = False
    return cfg.replace(**changes)


def capture_config_from_args(args) -> CaptureConfig:
    overrides = {k: v for k, v in config_overrides(args).items() if k in CAPTURE_SETTINGS}
    if getattr(args, "handshake_timeout", None) is not None:
        overrides["handshake_timeout"] = args.handshake_timeout
    if getattr(args, "reorder_skew", None) is not None:
        overrides["reorder_skew"] = args.reorder_skew
    try:
        return CaptureConfig.from_dict(overrides)
    except TypeError as e:
        raise ValueError(f"invalid connection tracking settings: {e}")


def analyzer_config_from_args(args) -> AnalyzerConfig:
    cfg = AnalyzerConfig()
    if args.analyzers is not None:
        cfg = cfg.replace(enabled=frozenset(args.analyzers))
    if args.signatures:
        cfg = cfg.replace(signatures=SignatureTable.load(args.signatures))
    return cfg


@dataclasses.dataclass
class RunConfig:
    """Everything one command needs, resolved from the command line."""

    inputs: list[str]
    fmt: str
    detector: DetectorConfig
    analyzer: AnalyzerConfig
    out: str
    capture: CaptureConfig = dataclasses.field(default_factory=CaptureConfig)
    seed: int = 0
    labels: str | None = None

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        return cls(
            inputs=list(getattr(args, "input", None) or []),
            fmt=getattr(args, "format", "auto"),
            detector=detector_config_from_args(args),
            analyzer=analyzer_config_from_args(args) if hasattr(args, "analyzers") else AnalyzerConfig(),
            out=args.out,
            capture=capture_config_from_args(args),
            seed=args.seed,
            labels=getattr(args, "labels", None),
        )


def load_labels(path: str) -> dict[str, str]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Labels file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return read_labels(f)


def load_experiment(cfg: RunConfig, progress_callback=None) -> LabeledTrace:
    """The labeled trace a run evaluates.

    With an input trace the labels come from ``cfg.labels``; without one
    the default synthetic experiment is generated from ``cfg.seed``.
    """
    if not cfg.inputs:
        logger.info("Generating the default experiment with seed %d", cfg.seed)
        return ExperimentConfig(seed=cfg.seed).build(progress_callback)
    if len(cfg.inputs) > 1:
        raise ValueError("evaluation takes a single input trace")
    if not cfg.labels:
        raise ValueError("--labels is required together with --input")
    labels = load_labels(cfg.labels)
    packets = read_trace(cfg.inputs[0], cfg.fmt, progress_callback)
    return LabeledTrace(packets, labels)

"""Detector evaluation over labeled traces.

A trace is analyzed once (connection tracking, coordination analyzers and
peer mappings); detection is then replayed for every mode and threshold
from the recorded events and prediction answers.
"""

import dataclasses
import enum
import json
import logging
from typing import TextIO

import numpy as np

from ..analyzer import AnalyzerConfig, TraceAnalysis, analyze_trace
from ..capture import CaptureConfig
from ..scandet import Alarm, AlarmKind, DetectorConfig, ScanDetector
from ..synth import LabeledTrace

logger = logging.getLogger(__name__)

DEFAULT_LADDER = (5, 10, 20, 50, 100, 200, 500, 1000)
HISTOGRAM_THRESHOLD = 100


class Mode(str, enum.Enum):
    BASELINE = "baseline"
    PREDICTED = "predicted"
    PREDICTED_PPR = "predicted+ppr"

    def configure(self, cfg: DetectorConfig) -> DetectorConfig:
        return cfg.replace(
            suppress_predicted=self is not Mode.BASELINE,
            suppress_ppr=self is Mode.PREDICTED_PPR,
        )


MODES = tuple(Mode)


@dataclasses.dataclass(frozen=True)
class RocPoint:
    mode: str
    threshold: int
    tpr: float
    fpr: float


@dataclasses.dataclass(frozen=True)
class FlagBreakdown:
    total_flags_baseline: int
    suppressed: int
    residual_flags: int
    residual_true: int
    residual_false: int
    residual_unlabeled: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class DurationHistogram:
    """Durations from first activity to the k-th predicted connection, binned."""

    durations: dict[str, float]
    bin_width: float
    starts: np.ndarray
    counts: np.ndarray

    def first_bin_share(self, sources=None) -> float:
        """Share of ``sources`` (default: every measured source) in the first bin."""
        sources = list(self.durations if sources is None else sources)
        if not sources:
            return 0.0
        in_first = np.array([self.durations.get(s, np.inf) < self.bin_width for s in sources])
        return float(in_first.mean())


def prepare(
    trace: LabeledTrace,
    analyzer_cfg: AnalyzerConfig | None = None,
    capture_cfg: CaptureConfig | None = None,
    progress_callback=None,
) -> TraceAnalysis:
    """Analyze ``trace`` once for later detection replays."""
    return analyze_trace(
        trace.packets,
        analyzer_cfg,
        Mode.BASELINE.configure(DetectorConfig()),
        capture_cfg,
        progress_callback,
    )


def detect(analysis: TraceAnalysis, cfg: DetectorConfig) -> list[Alarm]:
    """Replay the detector over the recorded terminal events."""
    detector = ScanDetector(cfg)
    alarms = []
    for event in analysis.events:
        alarms.extend(detector.observe(event, analysis.ledger))
    alarms.extend(detector.finalize())
    return alarms


def _flagged(alarms: list[Alarm]) -> set[str]:
    return {alarm.source for alarm in alarms if alarm.kind is AlarmKind.ADDRESS_SCAN}


def run_experiment(
    trace: LabeledTrace,
    cfg: DetectorConfig,
    mode: Mode | str,
    analysis: TraceAnalysis | None = None,
) -> set[str]:
    """Sources with at least one AddressScan alarm under ``mode``."""
    mode = Mode(mode)
    if analysis is None:
        analysis = prepare(trace)
    return _flagged(detect(analysis, mode.configure(cfg)))


def _rate(flagged: set[str], population: set[str]) -> float:
    if not population:
        return 0.0
    members = np.array(sorted(population))
    return float(np.isin(members, list(flagged)).mean())


def roc_points(
    trace: LabeledTrace,
    cfg: DetectorConfig,
    thresholds=DEFAULT_LADDER,
    modes=MODES,
    analysis: TraceAnalysis | None = None,
    progress_callback=None,
) -> list[RocPoint]:
    """One point per mode and threshold, mode by mode.

    Each threshold runs as a single-threshold detector. The true positive
    rate is over labeled scanners, the false positive rate over labeled
    BitTorrent hosts.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("at least one threshold is required")
    if analysis is None:
        analysis = prepare(trace, progress_callback=progress_callback)
    scanners, bt_hosts = trace.scanners, trace.bt_hosts
    points = []
    for mode in modes:
        mode = Mode(mode)
        for threshold in thresholds:
            flagged = run_experiment(trace, cfg.with_threshold(threshold), mode, analysis)
            point = RocPoint(mode.value, threshold, _rate(flagged, scanners), _rate(flagged, bt_hosts))
            points.append(point)
            message = f"{mode.value} threshold {threshold}: tpr={point.tpr:.3f} fpr={point.fpr:.3f}"
            logger.info(message)
            if progress_callback:
                progress_callback(message)
    return points


def predicted_duration_histogram(
    trace: LabeledTrace,
    cfg: DetectorConfig,
    k: int = 100,
    bin: float = 900.0,
    threshold: int = HISTOGRAM_THRESHOLD,
    analysis: TraceAnalysis | None = None,
) -> DurationHistogram:
    """Time each baseline-flagged source needed to make ``k`` predicted connections.

    Parameters
    ----------
    trace : LabeledTrace
    cfg : DetectorConfig
        Window and shutdown settings; the detector runs in baseline mode
        with ``threshold`` as its only report threshold.
    k : int
        Predicted terminal connections the detector must have seen when
        the source is flagged; the k-th earliest of them ends the duration.
    bin : float
        Histogram bin width in seconds.
    threshold : int
        Report threshold defining the flag time.

    Returns
    -------
    DurationHistogram
        Sources with fewer than ``k`` predicted connections at their flag
        time are left out.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if bin <= 0:
        raise ValueError("bin must be positive")
    if analysis is None:
        analysis = prepare(trace)
    detector = ScanDetector(Mode.BASELINE.configure(cfg.with_threshold(threshold)))
    # predicted connection timestamps seen so far, per source
    seen: dict[str, list[float]] = {}
    flagged: set[str] = set()
    durations = {}
    for event in analysis.events:
        source = event.initiator
        if analysis.ledger.is_predicted(source, event.responder, event.responder_port, event.ts):
            seen.setdefault(source, []).append(event.ts)
        alarms = detector.observe(event)
        if source in flagged or not any(alarm.kind is AlarmKind.ADDRESS_SCAN for alarm in alarms):
            continue
        flagged.add(source)
        stamps = np.sort(np.array(seen.get(source, []), dtype=float))
        if len(stamps) >= k:
            durations[source] = float(stamps[k - 1] - analysis.first_seen[source])

    if durations:
        counts = np.bincount((np.array(list(durations.values())) // bin).astype(int))
    else:
        counts = np.zeros(0, dtype=int)
    starts = np.arange(len(counts)) * float(bin)
    return DurationHistogram(durations, float(bin), starts, counts)


def flag_breakdown(
    trace: LabeledTrace,
    cfg: DetectorConfig,
    truth: dict[str, str] | None = None,
    mode: Mode | str = Mode.PREDICTED,
    analysis: TraceAnalysis | None = None,
) -> FlagBreakdown:
    """Split the baseline flags into suppressed and residual ones.

    Residual flags are classified by ``truth`` (default: the trace labels)
    into true (scanners), false (BitTorrent hosts) and unlabeled.
    """
    truth = trace.labels if truth is None else truth
    if analysis is None:
        analysis = prepare(trace)
    baseline = run_experiment(trace, cfg, Mode.BASELINE, analysis)
    kept = run_experiment(trace, cfg, mode, analysis)
    residual = baseline & kept
    residual_true = sum(1 for s in residual if s in truth and truth[s] != "bittorrent")
    residual_false = sum(1 for s in residual if truth.get(s) == "bittorrent")
    return FlagBreakdown(
        total_flags_baseline=len(baseline),
        suppressed=len(baseline) - len(residual),
        residual_flags=len(residual),
        residual_true=residual_true,
        residual_false=residual_false,
        residual_unlabeled=len(residual) - residual_true - residual_false,
    )


def _number(value: float) -> str:
    return f"{value:.6f}".rstrip("0").rstrip(".")


def write_roc_csv(points: list[RocPoint], stream: TextIO) -> None:
    """``mode,threshold,tpr,fpr`` rows, rates with six decimals."""
    rows = np.array(
        [[p.mode, str(p.threshold), f"{p.tpr:.6f}", f"{p.fpr:.6f}"] for p in points], dtype=object
    ).reshape(-1, 4)
    np.savetxt(stream, rows, fmt="%s", delimiter=",", header="mode,threshold,tpr,fpr", comments="")


def write_histogram_csv(histogram: DurationHistogram, stream: TextIO) -> None:
    rows = np.array(
        [[_number(start), str(int(count))] for start, count in zip(histogram.starts, histogram.counts)],
        dtype=object,
    ).reshape(-1, 2)
    np.savetxt(stream, rows, fmt="%s", delimiter=",", header="bin_start_seconds,count", comments="")


def write_breakdown_json(breakdown: FlagBreakdown, stream: TextIO) -> None:
    json.dump(breakdown.to_dict(), stream, indent=2)
    stream.write("\n")

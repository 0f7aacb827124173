"""Failed-connection scan detector with BitTorrent-aware suppression.

A source is reported when the number of distinct destinations it failed
to connect to inside a sliding window crosses one of the report
thresholds. Two mechanisms keep BitTorrent hosts out of the reports:

* failures to destinations the source was told about in coordination
  traffic (see :mod:`bt_scan_tools.peermap`) do not count;
* at a threshold crossing, a source whose port/peer ratio lies inside
  ``[ppr_lower, ppr_upper]`` behaves like a P2P client and is not reported.
"""

import dataclasses
import enum
import heapq
import logging
from typing import Protocol

from ..capture import ConnectionEvent, Outcome

logger = logging.getLogger(__name__)


class Predictor(Protocol):
    def is_predicted(self, source: str, dst: str, dport: int, now: float) -> bool: ...


@dataclasses.dataclass(frozen=True)
class DetectorConfig:
    """Scan detector settings.

    Parameters
    ----------
    report_thresholds : tuple[int, ...]
        Distinct failed-destination counts at which a source is reported,
        strictly ascending.
    window : float
        Length in seconds of the sliding window over failed destinations.
    shutdown_threshold : int
        Distinct count after which the source is no longer reported on.
    ppr_lower, ppr_upper : float
        Port/peer ratio band treated as P2P behavior.
    suppress_predicted : bool
        Ignore failures to predicted destinations.
    suppress_ppr : bool
        Suppress reports for sources whose port/peer ratio lies in the band.
    """

    report_thresholds: tuple[int, ...] = (20, 100)
    window: float = 900.0
    shutdown_threshold: int = 100
    ppr_lower: float = 0.75
    ppr_upper: float = 1.0
    suppress_predicted: bool = True
    suppress_ppr: bool = True

    def __post_init__(self):
        thresholds = tuple(self.report_thresholds)
        object.__setattr__(self, "report_thresholds", thresholds)
        if not thresholds:
            raise ValueError("at least one report threshold is required")
        if thresholds[0] < 1 or any(a >= b for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError(f"report thresholds must be positive and strictly ascending: {thresholds}")
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.shutdown_threshold < 1:
            raise ValueError("shutdown_threshold must be at least 1")
        if not 0 < self.ppr_lower <= self.ppr_upper:
            raise ValueError("PPR bounds must satisfy 0 < ppr_lower <= ppr_upper")

    @classmethod
    def from_dict(cls, values: dict) -> "DetectorConfig":
        unknown = set(values) - {field.name for field in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown detector settings: {', '.join(sorted(unknown))}")
        return cls(**values)

    def replace(self, **changes) -> "DetectorConfig":
        return dataclasses.replace(self, **changes)

    def with_threshold(self, threshold: int) -> "DetectorConfig":
        """Single-threshold variant; shutdown never precedes the report."""
        return self.replace(
            report_thresholds=(threshold,),
            shutdown_threshold=max(self.shutdown_threshold, threshold),
        )


class AlarmKind(str, enum.Enum):
    ADDRESS_SCAN = "AddressScan"
    SHUTDOWN_THRESH = "ShutdownThresh"
    SCAN_SUMMARY = "ScanSummary"
    PORT_SCAN_SUMMARY = "PortScanSummary"
    SUPPRESSED_BY_PREDICTION = "SuppressedByPrediction"
    SUPPRESSED_BY_PPR = "SuppressedByPPR"

    @property
    def suppression(self) -> bool:
        return self in (AlarmKind.SUPPRESSED_BY_PREDICTION, AlarmKind.SUPPRESSED_BY_PPR)


@dataclasses.dataclass(frozen=True)
class Alarm:
    kind: AlarmKind
    ts: float
    source: str
    count: int
    detail: str = ""


def format_alarm(alarm: Alarm) -> str:
    """``<ts> <kind> <source> <count> <detail>``"""
    return f"{alarm.ts:.6f} {alarm.kind.value} {alarm.source} {alarm.count} {alarm.detail}".rstrip()


@dataclasses.dataclass
class ScanTracker:
    """Detector state of one source."""

    source: str
    # destination -> timestamp of its latest counted failure
    failed: dict[str, float] = dataclasses.field(default_factory=dict)
    ports: set[int] = dataclasses.field(default_factory=set)
    peers: set[str] = dataclasses.field(default_factory=set)
    fired: set[int] = dataclasses.field(default_factory=set)
    shutdown: bool = False
    address_scans: int = 0
    clock: float = float("-inf")
    last_ts: float = float("-inf")
    _expiry: list[tuple[float, str]] = dataclasses.field(default_factory=list, repr=False)

    @property
    def flagged(self) -> bool:
        return self.address_scans > 0

    def advance(self, ts: float, window: float) -> float:
        """Move the clock to ``ts`` if later and prune the window; returns the cutoff."""
        self.clock = max(self.clock, ts)
        cutoff = self.clock - window
        while self._expiry and self._expiry[0][0] < cutoff:
            stamp, old = heapq.heappop(self._expiry)
            if self.failed.get(old) == stamp:
                del self.failed[old]
        return cutoff

    def add_failure(self, dst: str, ts: float, window: float) -> None:
        cutoff = self.advance(ts, window)
        if ts >= cutoff and ts > self.failed.get(dst, float("-inf")):
            self.failed[dst] = ts
            heapq.heappush(self._expiry, (ts, dst))


def compute_ppr(tracker: ScanTracker) -> float | None:
    """Unique destination ports over unique destination addresses; None without peers."""
    if not tracker.peers:
        return None
    return len(tracker.ports) / len(tracker.peers)


class ScanDetector:
    """Per-trace scan detector; feed terminal events in trace order."""

    def __init__(self, config: DetectorConfig | None = None):
        self.config = config or DetectorConfig()
        self.trackers: dict[str, ScanTracker] = {}

    def tracker(self, source: str) -> ScanTracker:
        tracker = self.trackers.get(source)
        if tracker is None:
            tracker = self.trackers[source] = ScanTracker(source)
        return tracker

    @property
    def flagged(self) -> set[str]:
        return {source for source, tracker in self.trackers.items() if tracker.flagged}

    def observe(self, event: ConnectionEvent, mappings: Predictor | None = None) -> list[Alarm]:
        """Update the initiator's state with one terminal event.

        Every event feeds the port/peer sets. Failed events either are
        suppressed as predicted or join the windowed destination set; the
        returned alarms describe threshold crossings, suppressions and the
        shutdown of the source.
        """
        if not event.terminal:
            return []
        cfg = self.config
        st = self.tracker(event.initiator)
        st.ports.add(event.responder_port)
        st.peers.add(event.responder)
        st.last_ts = max(st.last_ts, event.ts)
        if event.outcome is not Outcome.FAILED:
            return []

        target = f"{event.responder}:{event.responder_port}/{event.proto.value}"
        # every failure moves the clock, predicted or not
        st.advance(event.ts, cfg.window)
        if (
            cfg.suppress_predicted
            and mappings is not None
            and mappings.is_predicted(
                event.initiator, event.responder, event.responder_port, event.ts
            )
        ):
            if st.shutdown:
                return []
            return [
                Alarm(AlarmKind.SUPPRESSED_BY_PREDICTION, event.ts, st.source, len(st.failed), target)
            ]

        st.add_failure(event.responder, event.ts, cfg.window)
        if st.shutdown:
            return []

        alarms = []
        count = len(st.failed)
        for threshold in cfg.report_thresholds:
            if count < threshold or threshold in st.fired:
                continue
            st.fired.add(threshold)
            ppr = compute_ppr(st)
            if cfg.suppress_ppr and ppr is not None and cfg.ppr_lower <= ppr <= cfg.ppr_upper:
                alarms.append(
                    Alarm(AlarmKind.SUPPRESSED_BY_PPR, event.ts, st.source, threshold, f"ppr={ppr:.4f}")
                )
                continue
            st.address_scans += 1
            alarms.append(
                Alarm(
                    AlarmKind.ADDRESS_SCAN,
                    event.ts,
                    st.source,
                    threshold,
                    f"has scanned {count} hosts ({event.responder_port}/{event.proto.value})",
                )
            )
        if count >= cfg.shutdown_threshold:
            st.shutdown = True
            alarms.append(
                Alarm(
                    AlarmKind.SHUTDOWN_THRESH,
                    event.ts,
                    st.source,
                    count,
                    "shutdown threshold reached",
                )
            )
            logger.debug("Shutdown threshold reached for %s", st.source)
        return alarms

    def finalize(self) -> list[Alarm]:
        """End-of-trace summaries for every flagged source."""
        alarms = []
        for st in self.trackers.values():
            if not st.flagged:
                continue
            alarms.append(
                Alarm(
                    AlarmKind.SCAN_SUMMARY,
                    st.last_ts,
                    st.source,
                    len(st.peers),
                    f"scanned a total of {len(st.peers)} hosts",
                )
            )
            alarms.append(
                Alarm(
                    AlarmKind.PORT_SCAN_SUMMARY,
                    st.last_ts,
                    st.source,
                    len(st.ports),
                    f"scanned a total of {len(st.ports)} ports",
                )
            )
        return alarms

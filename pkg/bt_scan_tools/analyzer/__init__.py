"""Analysis engine: per-packet analyzers, peer mappings and the scan detector."""

import dataclasses
import logging
from collections.abc import Iterable

from ..bencode import BencodeError
from ..capture import (
    CaptureConfig,
    ConnectionEvent,
    ConnectionTracker,
    PacketRecord,
    Proto,
)
from ..dht import (
    AdhtConfig,
    AdhtTransactionTable,
    SignatureTable,
    adht_match_reply,
    adht_parse_request,
    adht_register,
    btudp_match,
    mdht_extract,
)
from ..peermap import PeerMapConfig, PeerMappings, PredictedPeer, Provenance
from ..pex import scan_utpex
from ..scandet import Alarm, AlarmKind, DetectorConfig, ScanDetector
from ..trackers import parse_udp_tracker, scan_http_tracker
from ..wire import Endpoint, WireRangeError

logger = logging.getLogger(__name__)

ANALYZERS = tuple(provenance.value for provenance in Provenance)
PROGRESS_EVERY = 50_000


@dataclasses.dataclass(frozen=True)
class AnalyzerConfig:
    """Which analyzers run and how.

    Parameters
    ----------
    enabled : frozenset[str]
        Analyzer names, a subset of :data:`ANALYZERS`.
    signatures : SignatureTable
        BTUDP signatures.
    adht : AdhtConfig
    peermap : PeerMapConfig
    """

    enabled: frozenset[str] = frozenset(ANALYZERS)
    signatures: SignatureTable = dataclasses.field(
        default_factory=SignatureTable.default, compare=False
    )
    adht: AdhtConfig = dataclasses.field(default_factory=AdhtConfig)
    peermap: PeerMapConfig = dataclasses.field(default_factory=PeerMapConfig)

    def __post_init__(self):
        enabled = frozenset(self.enabled)
        object.__setattr__(self, "enabled", enabled)
        unknown = enabled - set(ANALYZERS)
        if unknown:
            raise ValueError(
                f"unknown analyzers: {', '.join(sorted(unknown))}; choose from {', '.join(ANALYZERS)}"
            )

    @classmethod
    def from_dict(cls, values: dict) -> "AnalyzerConfig":
        """Build a config from JSON-style values.

        ``signatures`` is a path to a signature file; ``adht`` and
        ``peermap`` are objects of field overrides.
        """
        unknown = set(values) - {field.name for field in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown analyzer settings: {', '.join(sorted(unknown))}")
        kwargs = {}
        if "enabled" in values:
            kwargs["enabled"] = frozenset(values["enabled"])
        if "signatures" in values:
            kwargs["signatures"] = SignatureTable.load(values["signatures"])
        if "adht" in values:
            kwargs["adht"] = _nested(AdhtConfig, values["adht"], "adht")
        if "peermap" in values:
            kwargs["peermap"] = _nested(PeerMapConfig, values["peermap"], "peermap")
        return cls(**kwargs)

    def replace(self, **changes) -> "AnalyzerConfig":
        return dataclasses.replace(self, **changes)


def _nested(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ValueError(f"{name} settings must be a JSON object")
    unknown = set(values) - {field.name for field in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown {name} settings: {', '.join(sorted(unknown))}")
    return cls(**values)


class BitTorrentAnalyzer:
    """Extracts predicted connections from coordination traffic.

    Every endpoint found is credited to the host expected to connect to it
    and stored in :attr:`mappings`.
    """

    def __init__(self, config: AnalyzerConfig | None = None, mappings: PeerMappings | None = None):
        self.config = config or AnalyzerConfig()
        self.mappings = mappings if mappings is not None else PeerMappings(self.config.peermap)
        self.adht_table = AdhtTransactionTable(self.config.adht)

    def _enabled(self, provenance: Provenance) -> bool:
        return provenance.value in self.config.enabled

    def _credit(self, credits, source: str, endpoints: Iterable[Endpoint], provenance, ts: float):
        for ip, port in endpoints:
            peer = PredictedPeer(ip, port, provenance, ts)
            self.mappings.add(source, peer)
            credits.append((source, peer))

    def _tcp(self, pkt: PacketRecord, credits) -> None:
        if self._enabled(Provenance.HTTP_TRACKER):
            self._credit(credits, pkt.dst_ip, scan_http_tracker(pkt), Provenance.HTTP_TRACKER, pkt.ts)
        if self._enabled(Provenance.PEX):
            added = scan_utpex(pkt)
            self._credit(credits, pkt.dst_ip, added, Provenance.PEX, pkt.ts)
            if added and self.config.peermap.pex_credit_both:
                self._credit(credits, pkt.src_ip, added, Provenance.PEX, pkt.ts)

    def _udp(self, pkt: PacketRecord, credits) -> None:
        if self._enabled(Provenance.UDP_TRACKER):
            response = parse_udp_tracker(pkt)
            if response is not None:
                self._credit(credits, pkt.dst_ip, response.peers, Provenance.UDP_TRACKER, pkt.ts)
        if self._enabled(Provenance.ADHT):
            request = adht_parse_request(pkt, self.config.adht)
            if request is not None:
                adht_register(request, pkt.src_ip, self.adht_table, pkt.ts)
            else:
                matched = adht_match_reply(pkt, self.adht_table)
                if matched is not None:
                    requester, endpoints = matched
                    self._credit(credits, requester, endpoints, Provenance.ADHT, pkt.ts)
        if self._enabled(Provenance.MDHT):
            self._credit(credits, pkt.dst_ip, mdht_extract(pkt), Provenance.MDHT, pkt.ts)
        if self._enabled(Provenance.BTUDP) and btudp_match(pkt, self.config.signatures):
            self._credit(
                credits, pkt.src_ip, [(pkt.dst_ip, pkt.dst_port)], Provenance.BTUDP, pkt.ts
            )

    def process(self, pkt: PacketRecord) -> list[tuple[str, PredictedPeer]]:
        """Run the enabled analyzers over one packet.

        Returns
        -------
        list[tuple[str, PredictedPeer]]
            ``(source, peer)`` credits made for this packet, duplicates of
            known mappings included.
        """
        credits: list[tuple[str, PredictedPeer]] = []
        if not pkt.payload:
            return credits
        try:
            if pkt.proto is Proto.TCP:
                self._tcp(pkt, credits)
            else:
                self._udp(pkt, credits)
        except (WireRangeError, BencodeError) as e:
            # malformed payloads never match
            logger.debug("Analyzer rejected packet at %.6f: %s", pkt.ts, e)
        return credits


class PredictionLedger:
    """Recorded ``is_predicted`` answers for the terminal events of one trace.

    The answer for an event depends only on its source, destination,
    port and timestamp, so replaying the recorded answers gives the same
    decisions as querying the live peer mappings.
    """

    def __init__(self):
        self._answers: dict[tuple[str, str, int, float], bool] = {}

    def __len__(self) -> int:
        return len(self._answers)

    def record(self, event: ConnectionEvent, predicted: bool) -> None:
        self._answers[(event.initiator, event.responder, event.responder_port, event.ts)] = predicted

    def is_predicted(self, source: str, dst: str, dport: int, now: float) -> bool:
        return self._answers.get((source, dst, dport, now), False)

    def predicted_count(self) -> int:
        return sum(self._answers.values())


@dataclasses.dataclass
class TraceAnalysis:
    alarms: list[Alarm]
    events: list[ConnectionEvent]
    mappings: PeerMappings
    first_seen: dict[str, float]
    ledger: PredictionLedger
    packets: int = 0

    @property
    def flagged(self) -> set[str]:
        return {alarm.source for alarm in self.alarms if alarm.kind is AlarmKind.ADDRESS_SCAN}


def analyze_trace(
    packets: Iterable[PacketRecord],
    analyzer_cfg: AnalyzerConfig | None = None,
    detector_cfg: DetectorConfig | None = None,
    capture_cfg: CaptureConfig | None = None,
    progress_callback=None,
) -> TraceAnalysis:
    """Run the whole pipeline over a trace in one pass.

    For each packet the analyzers run first, then the connection tracker;
    every terminal event is checked against the peer mappings and handed
    to the scan detector. Pending connections fail at the end of the
    trace and the detector's summaries close the alarm list.

    Parameters
    ----------
    packets : iterable of PacketRecord
        The trace in timestamp order.
    analyzer_cfg, detector_cfg, capture_cfg : optional
        Module configurations; defaults when omitted.
    progress_callback : callable, optional
        Called with a short status message every ``PROGRESS_EVERY`` packets.

    Returns
    -------
    TraceAnalysis
    """
    analyzer = BitTorrentAnalyzer(analyzer_cfg)
    tracker = ConnectionTracker(capture_cfg)
    detector = ScanDetector(detector_cfg)
    mappings = analyzer.mappings
    ledger = PredictionLedger()
    alarms: list[Alarm] = []
    events: list[ConnectionEvent] = []
    first_seen: dict[str, float] = {}

    def handle(event: ConnectionEvent) -> None:
        if not event.terminal:
            return
        events.append(event)
        ledger.record(
            event,
            mappings.is_predicted(event.initiator, event.responder, event.responder_port, event.ts),
        )
        alarms.extend(detector.observe(event, mappings))

    count = 0
    for pkt in packets:
        count += 1
        first_seen.setdefault(pkt.src_ip, pkt.ts)
        analyzer.process(pkt)
        for event in tracker.process(pkt):
            handle(event)
        if count % PROGRESS_EVERY == 0:
            message = f"Processed {count} packets, {len(alarms)} alarms so far"
            logger.info(message)
            if progress_callback:
                progress_callback(message)
    for event in tracker.flush():
        handle(event)
    alarms.extend(detector.finalize())

    logger.info(
        "Analyzed %d packets: %d terminal events, %d mappings, %d alarms",
        count, len(events), len(mappings), len(alarms),
    )
    return TraceAnalysis(alarms, events, mappings, first_seen, ledger, count)

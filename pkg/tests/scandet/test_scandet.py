from collections import defaultdict

import numpy as np
import pytest

from bt_scan_tools.capture import ConnectionEvent, Outcome, Proto
from bt_scan_tools.scandet import (
    Alarm,
    AlarmKind,
    DetectorConfig,
    ScanDetector,
    ScanTracker,
    compute_ppr,
    format_alarm,
)

SOURCE = "10.1.0.1"


def failed(ts, dst, port=445, source=SOURCE, proto=Proto.TCP):
    return ConnectionEvent(float(ts), source, dst, port, proto, Outcome.FAILED)


def established(ts, dst, port=445, source=SOURCE):
    return ConnectionEvent(float(ts), source, dst, port, Proto.TCP, Outcome.ESTABLISHED)


class SetPredictor:
    """Predicts a fixed set of (source, destination, port) triples."""

    def __init__(self, triples):
        self.triples = set(triples)

    def is_predicted(self, source, dst, dport, now):
        return (source, dst, dport) in self.triples


def observe_all(detector, events, predictor=None):
    alarms = []
    for event in events:
        alarms.extend(detector.observe(event, predictor))
    return alarms


def test_config_validation():
    """Test that invalid detector settings are rejected."""
    assert DetectorConfig().report_thresholds == (20, 100)
    assert DetectorConfig(report_thresholds=[5, 10]).report_thresholds == (5, 10)

    for kwargs in [
        {"report_thresholds": ()},
        {"report_thresholds": (20, 20)},
        {"report_thresholds": (100, 20)},
        {"report_thresholds": (0, 20)},
        {"window": 0},
        {"shutdown_threshold": 0},
        {"ppr_lower": 0},
        {"ppr_lower": 1.5, "ppr_upper": 1.0},
    ]:
        with pytest.raises(ValueError):
            DetectorConfig(**kwargs)

    with pytest.raises(ValueError, match="unknown detector settings"):
        DetectorConfig.from_dict({"treshold": 5})
    assert DetectorConfig.from_dict({"window": 60.0}).window == 60.0


def test_with_threshold():
    """Test single-threshold variants."""
    cfg = DetectorConfig().with_threshold(5)
    assert cfg.report_thresholds == (5,)
    assert cfg.shutdown_threshold == 100
    # Shutdown never precedes the only report
    assert DetectorConfig().with_threshold(500).shutdown_threshold == 500


def test_address_scan_and_shutdown():
    """Test threshold crossings, the shutdown and the silence after it."""
    detector = ScanDetector(DetectorConfig(suppress_ppr=False))
    alarms = observe_all(detector, [failed(i, f"172.16.0.{i}") for i in range(19)])
    assert alarms == []

    alarms = detector.observe(failed(19, "172.16.1.1"))
    assert alarms == [
        Alarm(AlarmKind.ADDRESS_SCAN, 19.0, SOURCE, 20, "has scanned 20 hosts (445/tcp)")
    ]

    alarms = observe_all(detector, [failed(20 + i, f"172.16.2.{i}") for i in range(80)])
    assert [(a.kind, a.count) for a in alarms] == [
        (AlarmKind.ADDRESS_SCAN, 100),
        (AlarmKind.SHUTDOWN_THRESH, 100),
    ]
    assert alarms[0].ts == alarms[1].ts == 99.0

    # Nothing more for this source
    assert observe_all(detector, [failed(100 + i, f"172.16.3.{i}") for i in range(50)]) == []
    assert detector.flagged == {SOURCE}
    assert detector.tracker(SOURCE).address_scans == 2


def test_window_expiry():
    """Test that failures older than the window no longer count."""
    detector = ScanDetector(DetectorConfig(report_thresholds=(5,), window=10.0, suppress_ppr=False))
    # One new destination every 3 seconds: at most four inside the window
    alarms = observe_all(detector, [failed(3 * i, f"172.16.0.{i}") for i in range(20)])
    assert alarms == []
    assert len(detector.tracker(SOURCE).failed) == 4

    # Repeated failures to one destination count once
    detector = ScanDetector(DetectorConfig(report_thresholds=(2,), suppress_ppr=False))
    assert observe_all(detector, [failed(i, "172.16.0.1") for i in range(10)]) == []


def test_out_of_order_events():
    """Test that a late event older than the window is not counted."""
    tracker = ScanTracker(SOURCE)
    tracker.add_failure("172.16.0.1", 100.0, 10.0)
    tracker.add_failure("172.16.0.2", 85.0, 10.0)
    tracker.add_failure("172.16.0.3", 95.0, 10.0)
    assert set(tracker.failed) == {"172.16.0.1", "172.16.0.3"}
    assert tracker.clock == 100.0


def test_predicted_failures_move_the_clock():
    """Test that suppression never flags a source the baseline detector leaves alone."""
    # Timed-out attempts reach the detector after a later reset
    events = [failed(20.0, "100.64.0.1", 6881), failed(0.0, "172.16.0.1"), failed(0.1, "172.16.0.2")]
    predictor = SetPredictor([(SOURCE, "100.64.0.1", 6881)])
    cfg = DetectorConfig(report_thresholds=(2,), window=10.0, suppress_ppr=False)

    baseline = ScanDetector(cfg.replace(suppress_predicted=False))
    predicted = ScanDetector(cfg)
    assert observe_all(baseline, events, predictor) == []
    alarms = observe_all(predicted, events, predictor)
    assert [a.kind for a in alarms] == [AlarmKind.SUPPRESSED_BY_PREDICTION]
    assert predicted.flagged == baseline.flagged == set()
    assert predicted.tracker(SOURCE).clock == 20.0
    assert predicted.tracker(SOURCE).failed == {}


def test_predicted_flags_within_baseline_flags():
    """Test on random out-of-order traffic that suppression only removes flags."""
    rng = np.random.default_rng(5)
    events = random_events(rng, n=2000)
    # Shuffle within a 40 s horizon, as lazily emitted timeouts do
    order = np.argsort([e.ts + rng.uniform(0, 40) for e in events], kind="stable")
    events = [events[i] for i in order]
    predicted = SetPredictor(
        {(e.initiator, e.responder, e.responder_port) for e in events if rng.random() < 0.3}
    )
    for window in (10.0, 30.0, 120.0):
        cfg = DetectorConfig(report_thresholds=(5, 20), window=window, suppress_ppr=False)
        baseline = ScanDetector(cfg.replace(suppress_predicted=False))
        suppressed = ScanDetector(cfg)
        observe_all(baseline, events, predicted)
        observe_all(suppressed, events, predicted)
        assert suppressed.flagged <= baseline.flagged


def test_predicted_failures_suppressed():
    """Test that failures to predicted destinations are reported as suppressed."""
    predictor = SetPredictor([(SOURCE, f"100.64.0.{i}", 6881) for i in range(30)])
    detector = ScanDetector(DetectorConfig(suppress_ppr=False))
    events = [failed(i, f"100.64.0.{i}", 6881) for i in range(30)]
    alarms = observe_all(detector, events, predictor)

    assert all(a.kind is AlarmKind.SUPPRESSED_BY_PREDICTION for a in alarms)
    assert len(alarms) == 30
    assert alarms[0].detail == "100.64.0.0:6881/tcp"
    assert alarms[0].count == 0
    assert detector.flagged == set()

    # Without prediction suppression the same failures are counted
    detector = ScanDetector(DetectorConfig(suppress_ppr=False, suppress_predicted=False))
    alarms = observe_all(detector, events, predictor)
    assert [a.kind for a in alarms] == [AlarmKind.ADDRESS_SCAN]


def test_ppr_suppression():
    """Test that P2P-like port/peer ratios suppress reports."""
    # Every destination on its own port: ratio 1
    events = [failed(i, f"100.64.0.{i}", 10000 + i) for i in range(25)]
    detector = ScanDetector(DetectorConfig())
    alarms = observe_all(detector, events)
    assert [(a.kind, a.count) for a in alarms] == [(AlarmKind.SUPPRESSED_BY_PPR, 20)]
    assert alarms[0].detail == "ppr=1.0000"
    assert detector.flagged == set()

    # A horizontal scan has a ratio of 1/20
    events = [failed(i, f"172.16.0.{i}", 445) for i in range(25)]
    detector = ScanDetector(DetectorConfig())
    alarms = observe_all(detector, events)
    assert [a.kind for a in alarms] == [AlarmKind.ADDRESS_SCAN]
    assert compute_ppr(detector.tracker(SOURCE)) == pytest.approx(1 / 25)

    # A vertical-looking ratio above the band is reported
    events = [failed(i, f"172.16.0.{i // 2}", 1 + i) for i in range(40)]
    detector = ScanDetector(DetectorConfig(report_thresholds=(20,)))
    alarms = observe_all(detector, events)
    assert [a.kind for a in alarms] == [AlarmKind.ADDRESS_SCAN]


def test_ppr_counts_established_connections():
    """Test that successful connections enter the port/peer ratio."""
    detector = ScanDetector(DetectorConfig(report_thresholds=(20,)))
    # Many successful connections to one port pull the ratio down
    alarms = observe_all(detector, [established(i, f"198.51.100.{i}", 80) for i in range(60)])
    assert alarms == []
    alarms = observe_all(detector, [failed(100 + i, f"100.64.0.{i}", 10000 + i) for i in range(20)])
    assert [a.kind for a in alarms] == [AlarmKind.ADDRESS_SCAN]
    assert compute_ppr(detector.tracker(SOURCE)) == pytest.approx(21 / 80)


def test_compute_ppr_without_peers():
    """Test that the ratio is undefined without peers."""
    assert compute_ppr(ScanTracker(SOURCE)) is None


def test_non_terminal_events_ignored():
    """Test that attempted events do not change any state."""
    detector = ScanDetector()
    event = ConnectionEvent(1.0, SOURCE, "172.16.0.1", 445, Proto.TCP, Outcome.ATTEMPTED)
    assert detector.observe(event) == []
    assert detector.trackers == {}


def test_finalize():
    """Test summaries for flagged sources only."""
    detector = ScanDetector(DetectorConfig(report_thresholds=(5,), suppress_ppr=False))
    observe_all(detector, [failed(i, f"172.16.0.{i}", 445 + i % 2) for i in range(6)])
    observe_all(detector, [failed(i, f"172.16.1.{i}", 445, source="10.1.0.2") for i in range(3)])

    alarms = detector.finalize()
    assert alarms == [
        Alarm(AlarmKind.SCAN_SUMMARY, 5.0, SOURCE, 6, "scanned a total of 6 hosts"),
        Alarm(AlarmKind.PORT_SCAN_SUMMARY, 5.0, SOURCE, 2, "scanned a total of 2 ports"),
    ]


def test_format_alarm():
    """Test the alarm log line format."""
    alarm = Alarm(AlarmKind.ADDRESS_SCAN, 12.3456789, SOURCE, 100, "has scanned 100 hosts (445/tcp)")
    assert format_alarm(alarm) == "12.345679 AddressScan 10.1.0.1 100 has scanned 100 hosts (445/tcp)"
    assert format_alarm(Alarm(AlarmKind.SCAN_SUMMARY, 1.0, SOURCE, 3)) == "1.000000 ScanSummary 10.1.0.1 3"
    assert AlarmKind.SUPPRESSED_BY_PPR.suppression
    assert not AlarmKind.ADDRESS_SCAN.suppression


# --------------------------------------------------------------------------
# brute-force comparison


def random_events(rng, n=3000):
    """Terminal events of four sources with different port habits, in time order."""
    events = []
    ts = 0.0
    for _ in range(n):
        ts += float(rng.exponential(0.3))
        source = f"10.9.0.{rng.integers(1, 5)}"
        target = int(rng.integers(0, 150))
        dst = f"172.16.0.{target}"
        if source == "10.9.0.1":
            port = 445
        elif source == "10.9.0.2":
            port = int(rng.integers(1, 4))
        elif source == "10.9.0.3":
            # one port per destination: a ratio of exactly 1
            port = 1024 + target
        else:
            port = int(rng.integers(1024, 65536))
        outcome = Outcome.ESTABLISHED if rng.random() < 0.1 else Outcome.FAILED
        events.append(ConnectionEvent(round(ts, 3), source, dst, port, Proto.TCP, outcome))
    return events


def brute_force_alarms(events, cfg, predicted=frozenset()):
    """Recompute the windowed counts from the full history at every event."""
    history = defaultdict(list)
    ports, peers = defaultdict(set), defaultdict(set)
    fired, shutdown, clock = defaultdict(set), set(), {}
    alarms = []

    def windowed(source):
        if source not in clock:
            return 0
        cutoff = clock[source] - cfg.window
        return len({dst for ts, dst in history[source] if ts >= cutoff})

    for e in events:
        source = e.initiator
        ports[source].add(e.responder_port)
        peers[source].add(e.responder)
        if e.outcome is not Outcome.FAILED:
            continue
        clock[source] = e.ts
        if cfg.suppress_predicted and (source, e.responder, e.responder_port) in predicted:
            if source not in shutdown:
                alarms.append((AlarmKind.SUPPRESSED_BY_PREDICTION, source, windowed(source), e.ts))
            continue
        history[source].append((e.ts, e.responder))
        if source in shutdown:
            continue
        count = windowed(source)
        for threshold in cfg.report_thresholds:
            if count >= threshold and threshold not in fired[source]:
                fired[source].add(threshold)
                ppr = len(ports[source]) / len(peers[source])
                if cfg.suppress_ppr and cfg.ppr_lower <= ppr <= cfg.ppr_upper:
                    alarms.append((AlarmKind.SUPPRESSED_BY_PPR, source, threshold, e.ts))
                else:
                    alarms.append((AlarmKind.ADDRESS_SCAN, source, threshold, e.ts))
        if count >= cfg.shutdown_threshold:
            shutdown.add(source)
            alarms.append((AlarmKind.SHUTDOWN_THRESH, source, count, e.ts))
    return alarms


@pytest.mark.parametrize(
    "cfg",
    [
        DetectorConfig(report_thresholds=(20, 60, 100), window=200.0, suppress_ppr=False),
        DetectorConfig(report_thresholds=(20, 100), window=200.0, shutdown_threshold=50, suppress_ppr=False),
        DetectorConfig(report_thresholds=(5, 10), window=15.0, suppress_ppr=False),
    ],
)
def test_matches_brute_force_without_suppression(cfg):
    """Test the detector against a full recount on random traffic."""
    events = random_events(np.random.default_rng(3))
    detector = ScanDetector(cfg)
    alarms = [(a.kind, a.source, a.count, a.ts) for a in observe_all(detector, events)]
    assert alarms == brute_force_alarms(events, cfg)
    assert any(kind is AlarmKind.ADDRESS_SCAN for kind, *_ in alarms)


def test_matches_brute_force_with_suppression():
    """Test prediction and port/peer ratio suppression against a full recount."""
    rng = np.random.default_rng(4)
    events = random_events(rng)
    predicted = frozenset(
        (e.initiator, e.responder, e.responder_port) for e in events if rng.random() < 0.3
    )
    cfg = DetectorConfig(report_thresholds=(10, 40, 80), window=120.0)
    detector = ScanDetector(cfg)
    alarms = [
        (a.kind, a.source, a.count, a.ts)
        for a in observe_all(detector, events, SetPredictor(predicted))
    ]
    assert alarms == brute_force_alarms(events, cfg, predicted)

    kinds = {kind for kind, *_ in alarms}
    assert AlarmKind.SUPPRESSED_BY_PREDICTION in kinds
    assert AlarmKind.SUPPRESSED_BY_PPR in kinds
    assert AlarmKind.ADDRESS_SCAN in kinds

import pytest

from bt_scan_tools.capture import PacketRecord, Proto, TcpFlags
from bt_scan_tools.evaluation import prepare
from bt_scan_tools.synth import ExperimentConfig


@pytest.fixture
def tcp():
    """Factory for TCP packet records; flags are given as letters (S, A, R, F)."""

    def make(ts, src, sport, dst, dport, flags="", payload=b""):
        return PacketRecord(
            float(ts), src, sport, dst, dport, Proto.TCP, TcpFlags.from_letters(flags), payload
        )

    return make


@pytest.fixture
def udp():
    """Factory for UDP packet records."""

    def make(ts, src, sport, dst, dport, payload=b""):
        return PacketRecord(float(ts), src, sport, dst, dport, Proto.UDP, payload=payload)

    return make


@pytest.fixture(scope="session")
def small_experiment():
    """A small labeled experiment: one scanner of each geometry and three BitTorrent hosts.

    Scanner rates are 1/s (horizontal, 200 targets), 10/s (vertical, 200
    ports) and 100/s (hybrid, 40 targets x 2 ports). Every BitTorrent host
    learns 150 peers, 120 of which are unconnectable.
    """
    config = ExperimentConfig(
        scanners=3,
        bt_hosts=3,
        seed=7,
        min_rate=1.0,
        max_rate=100.0,
        horizontal_targets=200,
        vertical_ports=200,
        hybrid_targets=40,
        hybrid_ports=2,
        bt_peers=150,
    )
    return config.build()


@pytest.fixture(scope="session")
def small_analysis(small_experiment):
    """The small experiment analyzed once, for detection replays."""
    return prepare(small_experiment)

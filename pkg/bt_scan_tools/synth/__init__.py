"""Labeled synthetic traces.

A trace mixes port scanners (horizontal, vertical or hybrid) with
BitTorrent hosts. Each BitTorrent host first fetches its peer list through
coordination traffic (trackers, DHTs, peer exchange) and then connects to
exactly those peers, most of which are unconnectable. Populations live in
separate address blocks so every initiating source carries a label.
"""

import dataclasses
import enum
import ipaddress
import json
import logging
import math
import struct
from collections.abc import Iterable
from typing import TextIO

import numpy as np

from ..bencode import encode
from ..capture import PacketRecord, Proto, TcpFlags
from ..dht import AdhtConfig
from ..wire import Endpoint, pack_compact

logger = logging.getLogger(__name__)

SCANNER_BLOCK = ipaddress.IPv4Network("10.1.0.0/16")
BT_HOST_BLOCK = ipaddress.IPv4Network("10.2.0.0/16")
SCAN_TARGET_BLOCK = ipaddress.IPv4Network("172.16.0.0/12")
BT_PEER_BLOCK = ipaddress.IPv4Network("100.64.0.0/10")
COORDINATOR_BLOCK = ipaddress.IPv4Network("198.51.100.0/24")

HTTP_TRACKER = ("198.51.100.10", 80)
UDP_TRACKER = ("198.51.100.11", 6969)
MDHT_NODE = ("198.51.100.12", 6881)
ADHT_NODE = ("198.51.100.13", 7000)
PEX_PEER = ("198.51.100.14", 51413)

SCAN_PORTS = (22, 23, 80, 139, 445, 3389)
COORDINATION_PROTOCOLS = ("http", "udp_tracker", "mdht", "adht", "pex", "btudp")
DEFAULT_MIX = ("http", "udp_tracker", "mdht", "adht", "pex")
# one version per ADHT header layout
ADHT_VERSIONS = (8, 12, 20, 26)

UDP_TRACKER_PROTOCOL_ID = 0x41727101980
PEX_CHUNK = 50
RTT = 0.02
COORDINATION_SPAN = 5.0
CONNECT_DELAY = 10.0

_FIRST_EPHEMERAL_PORT = 40000


class AddressBlockExhausted(ValueError):
    """A population does not fit in its address block."""


class HostKind(str, enum.Enum):
    HORIZONTAL = "horizontal_scanner"
    VERTICAL = "vertical_scanner"
    HYBRID = "hybrid_scanner"
    BITTORRENT = "bittorrent"

    @property
    def is_scanner(self) -> bool:
        return self is not HostKind.BITTORRENT


@dataclasses.dataclass(frozen=True)
class HostProfile:
    """One generated host.

    Parameters
    ----------
    kind : HostKind
    rate : float
        Connection attempts per second.
    seed : int
        Seed of the host's random generator.
    source : str
        Address of the host; :func:`assemble_experiment` assigns it.
    targets : int
        Scanners: number of target addresses (vertical scanners use one).
    ports : int
        Scanners: number of target ports (horizontal scanners use one).
    port : int, optional
        Horizontal scanners: the port scanned; drawn from ``SCAN_PORTS``
        when omitted.
    no_reply_fraction : float
        Scanners: share of SYNs that get no answer; the rest are reset.
    peers : int
        BitTorrent hosts: number of peers learned and contacted.
    unconnectable_fraction : float
        BitTorrent hosts: share of peers whose connection attempt fails.
    coordination_mix : tuple[str, ...]
        BitTorrent hosts: protocols delivering the peer list, out of
        ``COORDINATION_PROTOCOLS``.
    adht_version : int, optional
        BitTorrent hosts: ADHT protocol version; drawn from
        ``ADHT_VERSIONS`` when omitted.
    """

    kind: HostKind
    rate: float
    seed: int = 0
    source: str = ""
    targets: int = 100
    ports: int = 1
    port: int | None = None
    no_reply_fraction: float = 0.95
    peers: int = 250
    unconnectable_fraction: float = 0.8
    coordination_mix: tuple[str, ...] = DEFAULT_MIX
    adht_version: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", HostKind(self.kind))
        object.__setattr__(self, "coordination_mix", tuple(self.coordination_mix))
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if not 0.0 <= self.unconnectable_fraction <= 1.0:
            raise ValueError("unconnectable_fraction must lie in [0, 1]")
        if not 0.0 <= self.no_reply_fraction <= 1.0:
            raise ValueError("no_reply_fraction must lie in [0, 1]")
        if self.targets < 1 or self.ports < 1 or self.peers < 0:
            raise ValueError("targets and ports must be positive, peers non-negative")
        unknown = set(self.coordination_mix) - set(COORDINATION_PROTOCOLS)
        if unknown:
            raise ValueError(f"unknown coordination protocols: {', '.join(sorted(unknown))}")
        if self.kind is HostKind.BITTORRENT and self.peers and not self.coordination_mix:
            raise ValueError("a BitTorrent host needs at least one coordination protocol")

    def replace(self, **changes) -> "HostProfile":
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass
class LabeledTrace:
    packets: list[PacketRecord]
    labels: dict[str, str]

    def sources_of(self, kind_filter) -> set[str]:
        return {source for source, kind in self.labels.items() if kind_filter(HostKind(kind))}

    @property
    def scanners(self) -> set[str]:
        return self.sources_of(lambda kind: kind.is_scanner)

    @property
    def bt_hosts(self) -> set[str]:
        return self.sources_of(lambda kind: kind is HostKind.BITTORRENT)


# --------------------------------------------------------------------------
# packet builders


def http_tracker_response(peers: list[Endpoint], model: str = "compact", interval: int = 1800) -> bytes:
    """HTTP announce response carrying ``peers``.

    ``model`` is ``"compact"`` (binary string) or ``"dictionary"`` (list of
    ``ip``/``peer id``/``port`` dictionaries).
    """
    if model == "compact":
        peer_value = pack_compact(peers)
    elif model == "dictionary":
        peer_value = [
            {b"ip": ip.encode("ascii"), b"peer id": b"-SY0001-" + index.to_bytes(12, "big"), b"port": port}
            for index, (ip, port) in enumerate(peers)
        ]
    else:
        raise ValueError(f"unknown peer model {model!r}")
    body = encode({b"interval": interval, b"peers": peer_value})
    header = (
        "HTTP/1.1 200 OK\r\n"
        "Content-Type: text/plain\r\n"
        f"Content-Length: {len(body)}\r\n\r\n"
    ).encode("ascii")
    return header + body


def http_announce_request(info_hash: bytes, port: int) -> bytes:
    query = "".join(f"%{b:02x}" for b in info_hash)
    return (
        f"GET /announce?info_hash={query}&port={port}&compact=1 HTTP/1.1\r\n"
        f"Host: {HTTP_TRACKER[0]}\r\n\r\n"
    ).encode("ascii")


def udp_connect_request(transaction_id: int) -> bytes:
    return struct.pack(">QII", UDP_TRACKER_PROTOCOL_ID, 0, transaction_id)


def udp_connect_response(transaction_id: int, connection_id: int) -> bytes:
    return struct.pack(">IIQ", 0, transaction_id, connection_id)


def udp_announce_request(
    connection_id: int,
    transaction_id: int,
    info_hash: bytes,
    peer_id: bytes,
    port: int,
    num_want: int = -1,
) -> bytes:
    return struct.pack(
        ">QII20s20sQQQIIIiH",
        connection_id, 1, transaction_id, info_hash, peer_id,
        0, 0, 0, 0, 0, 0, num_want, port,
    )


def udp_announce_response(
    transaction_id: int,
    peers: list[Endpoint],
    interval: int = 1800,
    leechers: int = 0,
    seeders: int = 0,
) -> bytes:
    return struct.pack(">IIIII", 1, transaction_id, interval, leechers, seeders) + pack_compact(peers)


def mdht_get_peers_query(transaction_id: bytes, node_id: bytes, info_hash: bytes) -> bytes:
    return encode(
        {
            b"a": {b"id": node_id, b"info_hash": info_hash},
            b"q": b"get_peers",
            b"t": transaction_id,
            b"y": b"q",
        }
    )


def mdht_response(
    values: list[Endpoint],
    nodes: list[Endpoint],
    transaction_id: bytes = b"aa",
    node_id: bytes = bytes(20),
) -> bytes:
    """KRPC ``get_peers`` response; empty ``values`` or ``nodes`` are left out."""
    reply = {b"id": node_id, b"token": b"synth"}
    if values:
        reply[b"values"] = [pack_compact([endpoint]) for endpoint in values]
    if nodes:
        reply[b"nodes"] = b"".join(
            index.to_bytes(20, "big") + pack_compact([endpoint])
            for index, endpoint in enumerate(nodes, start=1)
        )
    return encode({b"r": reply, b"t": transaction_id, b"y": b"r"})


def _adht_address(endpoint: Endpoint) -> bytes:
    return bytes([4]) + pack_compact([endpoint])


def _adht_contact(endpoint: Endpoint, version: int) -> bytes:
    return bytes([1, version]) + _adht_address(endpoint)


def _adht_versioned_fields(version: int, config: AdhtConfig, vendor_id: int, network_id: int) -> bytes:
    fields = b""
    if version >= config.vendor_id_version:
        fields += bytes([vendor_id])
    if version >= config.networks_version:
        fields += struct.pack(">I", network_id)
    return fields


def adht_request(
    connection_id: int,
    action: int,
    transaction_id: int,
    version: int,
    node_address: Endpoint,
    instance_id: int = 0,
    time: int = 0,
    vendor_id: int = 0,
    network_id: int = 0,
    config: AdhtConfig | None = None,
) -> bytes:
    config = config or AdhtConfig()
    payload = struct.pack(">QIIB", connection_id, action, transaction_id, version)
    payload += _adht_versioned_fields(version, config, vendor_id, network_id)
    if version >= config.fix_originator_version:
        payload += bytes([version])
    return payload + _adht_address(node_address) + struct.pack(">IQ", instance_id, time)


def adht_reply(
    action: int,
    transaction_id: int,
    connection_id: int,
    version: int,
    contacts: list[Endpoint] | None = None,
    values: list[Endpoint] | None = None,
    instance_id: int = 0,
    vendor_id: int = 0,
    network_id: int = 0,
    config: AdhtConfig | None = None,
) -> bytes:
    """Find-node or find-value reply.

    Find-value replies carry ``values`` (their originators are the
    endpoints) when given, else ``contacts``.
    """
    config = config or AdhtConfig()
    payload = struct.pack(">IIQB", action, transaction_id, connection_id, version)
    payload += _adht_versioned_fields(version, config, vendor_id, network_id)
    payload += struct.pack(">I", instance_id)
    if action == config.find_value_reply:
        if values is not None:
            payload += bytes([1]) + struct.pack(">H", len(values))
            for index, originator in enumerate(values):
                value = index.to_bytes(4, "big")
                payload += struct.pack(">QH", 0, len(value)) + value + _adht_contact(originator, version)
            return payload
        payload += bytes([0])
    contacts = contacts or []
    payload += struct.pack(">H", len(contacts))
    return payload + b"".join(_adht_contact(endpoint, version) for endpoint in contacts)


def pex_message(added: list[Endpoint], extension_id: int = 1) -> bytes:
    """Length-prefixed extension message carrying a µTorrent PEX dictionary."""
    body = encode({b"added": pack_compact(added), b"added.f": bytes(len(added)), b"dropped": b""})
    return struct.pack(">IBB", len(body) + 2, 20, extension_id) + body


def utp_syn(connection_id: int, seq_nr: int = 1, timestamp: int = 0) -> bytes:
    return struct.pack(">BBHIIIHH", 0x41, 0, connection_id, timestamp, 0, 0x100000, seq_nr, 0)


def utp_state(connection_id: int, seq_nr: int = 1, ack_nr: int = 1) -> bytes:
    return struct.pack(">BBHIIIHH", 0x21, 0, connection_id, 0, 0, 0x100000, seq_nr, ack_nr)


# --------------------------------------------------------------------------
# host generators


def _host_address(block: ipaddress.IPv4Network, index: int) -> str:
    if index >= block.num_addresses - 2:
        raise AddressBlockExhausted(f"address block {block} holds no host #{index + 1}")
    return str(block.network_address + 1 + index)


def _sample_addresses(rng: np.random.Generator, block: ipaddress.IPv4Network, count: int) -> list[str]:
    capacity = block.num_addresses - 2
    if count > capacity:
        raise AddressBlockExhausted(f"{count} addresses requested from {block}, which holds {capacity}")
    offsets = rng.choice(capacity, size=count, replace=False) + 1
    return [str(block.network_address + int(offset)) for offset in offsets]


def _stamp(ts: float) -> float:
    return round(ts, 6)


def _tcp(ts, src: Endpoint, dst: Endpoint, flags: str, payload: bytes = b"") -> PacketRecord:
    return PacketRecord(
        _stamp(ts), src[0], src[1], dst[0], dst[1], Proto.TCP, TcpFlags.from_letters(flags), payload
    )


def _udp(ts, src: Endpoint, dst: Endpoint, payload: bytes) -> PacketRecord:
    return PacketRecord(_stamp(ts), src[0], src[1], dst[0], dst[1], Proto.UDP, payload=payload)


def _handshake(ts: float, client: Endpoint, server: Endpoint) -> list[PacketRecord]:
    return [
        _tcp(ts, client, server, "S"),
        _tcp(ts + RTT, server, client, "SA"),
        _tcp(ts + 2 * RTT, client, server, "A"),
    ]


def gen_scanner(profile: HostProfile, start: float = 0.0) -> list[PacketRecord]:
    """SYN and reset packets of one scanner, in timestamp order.

    Horizontal scanners cover ``targets`` addresses on one port, vertical
    scanners ``ports`` ports of one address and hybrid scanners the grid of
    both, one port across all targets at a time. SYNs are sent at
    ``profile.rate``; a ``no_reply_fraction`` share goes unanswered and the
    rest are reset by the target.
    """
    if not profile.kind.is_scanner:
        raise ValueError(f"{profile.kind.value} is not a scanner kind")
    rng = np.random.default_rng(profile.seed)
    source = profile.source or _host_address(SCANNER_BLOCK, 0)

    if profile.kind is HostKind.HORIZONTAL:
        addresses = _sample_addresses(rng, SCAN_TARGET_BLOCK, profile.targets)
        port = profile.port if profile.port is not None else int(rng.choice(SCAN_PORTS))
        ports = [port]
    else:
        n_targets = 1 if profile.kind is HostKind.VERTICAL else profile.targets
        addresses = _sample_addresses(rng, SCAN_TARGET_BLOCK, n_targets)
        ports = sorted(int(p) for p in rng.choice(np.arange(1, 65536), size=profile.ports, replace=False))
    grid = [(address, port) for port in ports for address in addresses]

    silent = rng.random(len(grid)) < profile.no_reply_fraction
    packets = []
    for i, target in enumerate(grid):
        ts = start + i / profile.rate
        client = (source, _FIRST_EPHEMERAL_PORT + i % 20000)
        packets.append(_tcp(ts, client, target, "S"))
        if not silent[i]:
            packets.append(_tcp(ts + RTT, target, client, "RA"))
    packets.sort(key=lambda pkt: pkt.ts)
    return packets


class _PortAllocator:
    def __init__(self):
        self.next = _FIRST_EPHEMERAL_PORT

    def __call__(self) -> int:
        port = self.next
        self.next += 1
        return port


def _coordination(
    protocol: str,
    ts: float,
    host: str,
    peers: list[Endpoint],
    rng: np.random.Generator,
    ports: _PortAllocator,
    adht_version: int,
) -> list[PacketRecord]:
    info_hash = rng.bytes(20)
    if protocol == "http":
        client = (host, ports())
        model = "dictionary" if rng.random() < 0.5 else "compact"
        return _handshake(ts, client, HTTP_TRACKER) + [
            _tcp(ts + 3 * RTT, client, HTTP_TRACKER, "A", http_announce_request(info_hash, client[1])),
            _tcp(ts + 4 * RTT, HTTP_TRACKER, client, "A", http_tracker_response(peers, model)),
        ]
    if protocol == "udp_tracker":
        client = (host, ports())
        transaction_id = int(rng.integers(0, 2**32))
        connection_id = int(rng.integers(2**40, 2**62))
        return [
            _udp(ts, client, UDP_TRACKER, udp_connect_request(transaction_id)),
            _udp(ts + RTT, UDP_TRACKER, client, udp_connect_response(transaction_id, connection_id)),
            _udp(ts + 2 * RTT, client, UDP_TRACKER,
                 udp_announce_request(connection_id, transaction_id, info_hash, rng.bytes(20), client[1])),
            _udp(ts + 3 * RTT, UDP_TRACKER, client, udp_announce_response(transaction_id, peers)),
        ]
    if protocol == "mdht":
        client = (host, ports())
        transaction_id = rng.bytes(2)
        nodes = [(_host_address(COORDINATOR_BLOCK, 100 + i), 6881) for i in range(8)]
        return [
            _udp(ts, client, MDHT_NODE, mdht_get_peers_query(transaction_id, rng.bytes(20), info_hash)),
            _udp(ts + RTT, MDHT_NODE, client, mdht_response(peers, nodes, transaction_id)),
        ]
    if protocol == "adht":
        config = AdhtConfig()
        client = (host, ports())
        connection_id = int.from_bytes(rng.bytes(8), "big") | (1 << 63)
        transaction_id = int(rng.integers(0, 2**32))
        if rng.random() < 0.5:
            request_action, reply_kwargs = config.find_value_request, {"values": peers}
        else:
            request_action, reply_kwargs = config.find_node_request, {"contacts": peers}
        request = adht_request(connection_id, request_action, transaction_id, adht_version, client)
        reply = adht_reply(
            config.reply_for[request_action], transaction_id, connection_id, adht_version, **reply_kwargs
        )
        return [_udp(ts, client, ADHT_NODE, request), _udp(ts + RTT, ADHT_NODE, client, reply)]
    if protocol == "pex":
        client = (host, ports())
        packets = _handshake(ts, client, PEX_PEER)
        for i in range(0, len(peers), PEX_CHUNK):
            packets.append(
                _tcp(ts + (3 + i // PEX_CHUNK) * RTT, PEX_PEER, client, "A", pex_message(peers[i : i + PEX_CHUNK]))
            )
        return packets
    raise ValueError(f"unknown coordination protocol {protocol!r}")


def gen_bittorrent_host(profile: HostProfile, start: float = 0.0) -> list[PacketRecord]:
    """Coordination traffic followed by connection attempts of one BitTorrent host.

    The peers are split over the payload-carrying protocols of
    ``coordination_mix`` and announced within the first few seconds.
    Connection attempts to every peer start ``CONNECT_DELAY`` seconds after
    ``start`` at ``profile.rate``. ``ceil(unconnectable_fraction * peers)``
    of them fail, half unanswered and half reset; the others complete
    their handshake. With ``btudp`` in the mix each attempt is preceded by
    a uTP SYN to the same endpoint.
    """
    if profile.kind is not HostKind.BITTORRENT:
        raise ValueError(f"{profile.kind.value} is not a BitTorrent host")
    rng = np.random.default_rng(profile.seed)
    host = profile.source or _host_address(BT_HOST_BLOCK, 0)
    ports = _PortAllocator()
    k = profile.peers

    addresses = _sample_addresses(rng, BT_PEER_BLOCK, k)
    peer_ports = rng.integers(1025, 65536, size=k)
    peers = [(address, int(port)) for address, port in zip(addresses, peer_ports)]
    n_unconnectable = math.ceil(round(profile.unconnectable_fraction * k, 9))
    unconnectable = set(int(i) for i in rng.choice(k, size=n_unconnectable, replace=False))
    reset = rng.random(k) < 0.5
    adht_version = profile.adht_version or int(rng.choice(ADHT_VERSIONS))

    packets = []
    mix = [protocol for protocol in profile.coordination_mix if protocol != "btudp"]
    if mix and peers:
        step = COORDINATION_SPAN / len(mix)
        for j, protocol in enumerate(mix):
            packets.extend(
                _coordination(protocol, start + j * step, host, peers[j :: len(mix)], rng, ports, adht_version)
            )

    use_utp = "btudp" in profile.coordination_mix
    for n, i in enumerate(rng.permutation(k)):
        peer = peers[i]
        ts = start + CONNECT_DELAY + n / profile.rate
        connectable = int(i) not in unconnectable
        if use_utp:
            utp_client = (host, ports())
            connection_id = int(rng.integers(0, 2**16))
            packets.append(_udp(ts, utp_client, peer, utp_syn(connection_id)))
            if connectable:
                packets.append(_udp(ts + RTT, peer, utp_client, utp_state(connection_id)))
            ts += 2 * RTT
        client = (host, ports())
        if connectable:
            packets.extend(_handshake(ts, client, peer))
        else:
            packets.append(_tcp(ts, client, peer, "S"))
            if reset[i]:
                packets.append(_tcp(ts + RTT, peer, client, "RA"))
    packets.sort(key=lambda pkt: pkt.ts)
    return packets


# --------------------------------------------------------------------------
# experiments


def _derive_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


def assemble_experiment(
    scanners: list[HostProfile],
    bt_hosts: list[HostProfile],
    seed: int = 0,
    progress_callback=None,
) -> LabeledTrace:
    """Generate every host and merge the streams into one labeled trace.

    All hosts start at t=0. Scanners and BitTorrent hosts get consecutive
    addresses from their own blocks; each host's generator is seeded from
    ``seed``, its position and its profile seed.

    Raises
    ------
    AddressBlockExhausted
        If a population does not fit in its address block.
    """
    for population, block in ((scanners, SCANNER_BLOCK), (bt_hosts, BT_HOST_BLOCK)):
        if len(population) > block.num_addresses - 2:
            raise AddressBlockExhausted(f"{len(population)} hosts do not fit in {block}")

    packets: list[PacketRecord] = []
    labels: dict[str, str] = {}
    for role, (population, block, generate) in enumerate(
        ((scanners, SCANNER_BLOCK, gen_scanner), (bt_hosts, BT_HOST_BLOCK, gen_bittorrent_host))
    ):
        for index, profile in enumerate(population):
            profile = profile.replace(
                source=_host_address(block, index),
                seed=_derive_seed(seed, role, index, profile.seed),
            )
            packets.extend(generate(profile, 0.0))
            labels[profile.source] = profile.kind.value
            if progress_callback:
                progress_callback(f"Generated {profile.kind.value} {profile.source}")
    packets.sort(key=lambda pkt: pkt.ts)
    logger.info("Assembled %d packets from %d labeled sources", len(packets), len(labels))
    return LabeledTrace(packets, labels)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Population of the default controlled experiment.

    Scanner rates are spread log-uniformly over ``[min_rate, max_rate]``
    and scanner geometries cycle through ``scanner_kinds``.
    """

    scanners: int = 51
    bt_hosts: int = 49
    seed: int = 0
    min_rate: float = 0.01
    max_rate: float = 1000.0
    scanner_kinds: tuple[str, ...] = (
        HostKind.HORIZONTAL.value,
        HostKind.VERTICAL.value,
        HostKind.HYBRID.value,
    )
    horizontal_targets: int = 1024
    vertical_ports: int = 1000
    hybrid_targets: int = 256
    hybrid_ports: int = 4
    no_reply_fraction: float = 0.95
    bt_peers: int = 250
    unconnectable_fraction: float = 0.8
    bt_rate: float = 2.0
    coordination_mix: tuple[str, ...] = DEFAULT_MIX

    def __post_init__(self):
        object.__setattr__(self, "scanner_kinds", tuple(self.scanner_kinds))
        object.__setattr__(self, "coordination_mix", tuple(self.coordination_mix))
        if self.scanners < 0 or self.bt_hosts < 0:
            raise ValueError("population sizes must be non-negative")
        if not 0 < self.min_rate <= self.max_rate:
            raise ValueError("scanner rates must satisfy 0 < min_rate <= max_rate")
        if not self.scanner_kinds:
            raise ValueError("at least one scanner kind is required")
        for kind in self.scanner_kinds:
            if not HostKind(kind).is_scanner:
                raise ValueError(f"{kind} is not a scanner kind")
        if not 0.0 <= self.unconnectable_fraction <= 1.0:
            raise ValueError("unconnectable_fraction must lie in [0, 1]")
        unknown = set(self.coordination_mix) - set(COORDINATION_PROTOCOLS)
        if unknown:
            raise ValueError(f"unknown coordination protocols: {', '.join(sorted(unknown))}")

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        unknown = set(values) - {field.name for field in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment settings: {', '.join(sorted(unknown))}")
        return cls(**values)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def profiles(self) -> tuple[list[HostProfile], list[HostProfile]]:
        if self.scanners == 1:
            rates = np.array([self.max_rate])
        else:
            rates = np.logspace(np.log10(self.min_rate), np.log10(self.max_rate), self.scanners)
        scanners = []
        for i, rate in enumerate(rates[: self.scanners]):
            kind = HostKind(self.scanner_kinds[i % len(self.scanner_kinds)])
            if kind is HostKind.HORIZONTAL:
                geometry = {"targets": self.horizontal_targets, "ports": 1}
            elif kind is HostKind.VERTICAL:
                geometry = {"targets": 1, "ports": self.vertical_ports}
            else:
                geometry = {"targets": self.hybrid_targets, "ports": self.hybrid_ports}
            scanners.append(
                HostProfile(kind, float(rate), seed=i, no_reply_fraction=self.no_reply_fraction, **geometry)
            )
        bt_hosts = [
            HostProfile(
                HostKind.BITTORRENT,
                self.bt_rate,
                seed=i,
                peers=self.bt_peers,
                unconnectable_fraction=self.unconnectable_fraction,
                coordination_mix=self.coordination_mix,
                adht_version=ADHT_VERSIONS[i % len(ADHT_VERSIONS)],
            )
            for i in range(self.bt_hosts)
        ]
        return scanners, bt_hosts

    def build(self, progress_callback=None) -> LabeledTrace:
        scanners, bt_hosts = self.profiles()
        return assemble_experiment(scanners, bt_hosts, self.seed, progress_callback)


def write_labels(labels: dict[str, str], stream: TextIO) -> None:
    """One ``{"source": ..., "kind": ...}`` line per labeled source."""
    for source, kind in labels.items():
        stream.write(json.dumps({"source": source, "kind": kind}) + "\n")


def read_labels(lines: Iterable[str]) -> dict[str, str]:
    labels = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            source, kind = entry["source"], HostKind(entry["kind"]).value
        except (ValueError, KeyError, TypeError) as e:
            raise ValueError(f"labels line {lineno}: {e}") from e
        labels[source] = kind
    return labels

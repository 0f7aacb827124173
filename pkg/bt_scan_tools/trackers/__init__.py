"""Peer lists carried by central-tracker traffic.

HTTP tracker responses are found by scanning raw TCP payloads for the
bencoded ``peers`` key, in either the compact (binary string) or the
dictionary (list of ``ip``/``port`` dictionaries) model. UDP tracker
``announce_response`` packets are matched on their length and ``action``
field alone, without the preceding connect/announce requests.
"""

import dataclasses
import ipaddress

from ..bencode import scan_for_value
from ..capture import PacketRecord, Proto
from ..wire import (
    Endpoint,
    WireRangeError,
    compact_endpoints,
    ipv4_at,
    is_usable_endpoint,
    read_u16_be,
    read_u32_be,
)

PEERS_MARKER = b"5:peers"

ACTION_ANNOUNCE = 1
ANNOUNCE_HEADER_SIZE = 20
ANNOUNCE_PEER_SIZE = 6


@dataclasses.dataclass(frozen=True)
class AnnounceResponse:
    action: int
    transaction_id: int
    interval: int
    leechers: int
    seeders: int
    peers: list[Endpoint]


def _dictionary_peers(entries: list) -> list[Endpoint]:
    peers = []
    for entry in entries:
        if not isinstance(entry, dict):
            continue
        ip = entry.get(b"ip")
        port = entry.get(b"port")
        if not isinstance(ip, bytes) or isinstance(port, bool) or not isinstance(port, int):
            continue
        try:
            address = ipaddress.IPv4Address(ip.decode("ascii"))
        except (UnicodeDecodeError, ValueError):
            # hostnames and IPv6 literals are not followed
            continue
        endpoint = (str(address), port)
        if is_usable_endpoint(endpoint):
            peers.append(endpoint)
    return peers


def scan_http_tracker(pkt: PacketRecord) -> list[Endpoint]:
    """Extract the peer list of an HTTP tracker response from one TCP packet.

    The payload may start anywhere (HTTP headers, the middle of a body);
    only the ``5:peers`` key and the value following it matter.

    Returns
    -------
    list[Endpoint]
        Peers in payload order; empty when the packet carries no peer list.
    """
    if pkt.proto is not Proto.TCP or not pkt.payload:
        return []
    found = scan_for_value(pkt.payload, PEERS_MARKER)
    if found is None:
        return []
    value, _ = found
    if isinstance(value, bytes):
        return compact_endpoints(value)
    if isinstance(value, list):
        return _dictionary_peers(value)
    return []


def parse_udp_tracker(pkt: PacketRecord) -> AnnounceResponse | None:
    """Parse a UDP tracker ``announce_response``.

    The packet matches when its payload holds the 20-byte header plus a
    whole number of 6-byte peer entries and the ``action`` field is 1.
    Peer ``k`` has its address at ``20 + 6k`` and its port at ``24 + 6k``.
    """
    payload = pkt.payload
    if pkt.proto is not Proto.UDP or len(payload) < ANNOUNCE_HEADER_SIZE:
        return None
    if (len(payload) - ANNOUNCE_HEADER_SIZE) % ANNOUNCE_PEER_SIZE:
        return None
    try:
        if read_u32_be(payload, 0) != ACTION_ANNOUNCE:
            return None
        peers = []
        for base in range(ANNOUNCE_HEADER_SIZE, len(payload), ANNOUNCE_PEER_SIZE):
            endpoint = (ipv4_at(payload, base), read_u16_be(payload, base + 4))
            if is_usable_endpoint(endpoint):
                peers.append(endpoint)
        return AnnounceResponse(
            action=ACTION_ANNOUNCE,
            transaction_id=read_u32_be(payload, 4),
            interval=read_u32_be(payload, 8),
            leechers=read_u32_be(payload, 12),
            seeders=read_u32_be(payload, 16),
            peers=peers,
        )
    except WireRangeError:
        return None

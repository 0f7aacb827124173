"""Peer lists carried by decentralized coordination traffic.

Three analyzers live here:

* Azureus DHT (ADHT): requests are recognized by their protocol version
  byte and by the sender's UDP port echoed inside the node address; their
  transaction ids are kept in an :class:`AdhtTransactionTable`, and replies
  carrying a known transaction id are decoded for contact addresses.
* Mainline DHT (MDHT): ``values`` and ``nodes`` entries of KRPC responses.
* BTUDP: length and first-bytes signatures for miscellaneous BitTorrent UDP
  traffic whose destination port is also the peer's TCP port.

ADHT request header, in order (sizes in bytes)::

    CONNECTION_ID 8 | ACTION 4 | TRANSACTION_ID 4 | PROTOCOL_VERSION 1
    | VENDOR_ID 1        (version >= vendor_id_version)
    | NETWORK_ID 4       (version >= networks_version)
    | LOCAL_VERSION 1    (version >= fix_originator_version)
    | NODE_ADDRESS 7/19 | INSTANCE_ID 4 | TIME 8

ADHT reply header::

    ACTION 4 | TRANSACTION_ID 4 | CONNECTION_ID 8 | PROTOCOL_VERSION 1
    | VENDOR_ID 1 | NETWORK_ID 4 (same version rules) | INSTANCE_ID 4

followed by the body. Find-node replies carry ``count:short`` contacts.
Find-value replies carry ``has_values:boolean``, then either
``count:short`` contacts, or ``count:short`` values where each value is
``created:long, length:short, bytes, originator:contact``.

An address is ``length:byte (4|16), address bytes, port:short``; a contact
is ``type:byte (1 = UDP), version:byte, address``.
"""

import collections
import dataclasses
import logging
import re

from ..bencode import scan_for_value
from ..capture import PacketRecord, Proto
from ..wire import (
    Endpoint,
    WireRangeError,
    byte_at,
    compact_endpoints,
    ipv4_at,
    ipv6_at,
    is_usable_endpoint,
    read_u16_be,
    read_u32_be,
    read_u64_be,
)

logger = logging.getLogger(__name__)

VALUES_MARKER = b"6:values"
NODES_MARKER = b"5:nodes"
MDHT_NODE_SIZE = 26

CONTACT_TYPE_UDP = 1
_CONNECTION_ID_MSB = 1 << 63


@dataclasses.dataclass(frozen=True)
class AdhtConfig:
    """Protocol constants for the Azureus DHT analyzer.

    Parameters
    ----------
    min_version, max_version : int
        Protocol versions accepted as plausible in byte 16 of a request.
    vendor_id_version, networks_version, fix_originator_version : int
        First protocol versions carrying VENDOR_ID, NETWORK_ID and
        LOCAL_PROTOCOL_VERSION in the request and reply headers.
    find_node_request, find_node_reply, find_value_request, find_value_reply : int
        ACTION codes.
    table_ttl : float
        Seconds a registered transaction waits for its reply.
    table_capacity : int
        Most transactions kept; the least recently used is evicted first.
    """

    min_version: int = 1
    max_version: int = 64
    vendor_id_version: int = 13
    networks_version: int = 9
    fix_originator_version: int = 24
    find_node_request: int = 1024
    find_node_reply: int = 1025
    find_value_request: int = 1030
    find_value_reply: int = 1031
    table_ttl: float = 60.0
    table_capacity: int = 65536

    def __post_init__(self):
        if not 0 <= self.min_version <= self.max_version <= 255:
            raise ValueError("ADHT version range must lie within [0, 255]")
        if self.table_ttl <= 0 or self.table_capacity < 1:
            raise ValueError("ADHT table TTL and capacity must be positive")

    @property
    def reply_for(self) -> dict[int, int]:
        return {
            self.find_node_request: self.find_node_reply,
            self.find_value_request: self.find_value_reply,
        }


@dataclasses.dataclass(frozen=True)
class AdhtRequest:
    connection_id: int
    action: int
    transaction_id: int
    protocol_version: int
    node_address: Endpoint
    instance_id: int
    time: int
    vendor_id: int | None = None
    network_id: int | None = None
    local_protocol_version: int | None = None


@dataclasses.dataclass(slots=True)
class _PendingTransaction:
    requester: str
    action: int
    connection_id: int
    ts: float


class AdhtTransactionTable:
    """Pending ADHT find requests, keyed by transaction id."""

    def __init__(self, config: AdhtConfig | None = None):
        self.config = config or AdhtConfig()
        self._pending: collections.OrderedDict[int, _PendingTransaction] = (
            collections.OrderedDict()
        )

    def __len__(self) -> int:
        return len(self._pending)

    def register(self, request: AdhtRequest, requester: str, ts: float) -> None:
        # a newer request with the same id replaces the older one
        self._pending[request.transaction_id] = _PendingTransaction(
            requester, request.action, request.connection_id, ts
        )
        self._pending.move_to_end(request.transaction_id)
        while len(self._pending) > self.config.table_capacity:
            self._pending.popitem(last=False)

    def lookup(self, transaction_id: int, now: float) -> _PendingTransaction | None:
        entry = self._pending.get(transaction_id)
        if entry is None:
            return None
        if now - entry.ts > self.config.table_ttl:
            del self._pending[transaction_id]
            return None
        self._pending.move_to_end(transaction_id)
        return entry


def _read_address(payload: bytes, pos: int) -> tuple[Endpoint, int]:
    length = byte_at(payload, pos)
    if length == 4:
        address = ipv4_at(payload, pos + 1)
    elif length == 16:
        address = ipv6_at(payload, pos + 1)
    else:
        raise WireRangeError(f"invalid ADHT address length {length}")
    port = read_u16_be(payload, pos + 1 + length)
    return (address, port), pos + 1 + length + 2


def _read_contact(payload: bytes, pos: int) -> tuple[Endpoint | None, int]:
    """Return the contact's endpoint (None unless it is a UDP contact) and the next offset."""
    contact_type = byte_at(payload, pos)
    endpoint, end = _read_address(payload, pos + 2)
    if contact_type != CONTACT_TYPE_UDP:
        return None, end
    return endpoint, end


def _skip_versioned_fields(payload: bytes, pos: int, version: int, config: AdhtConfig):
    vendor_id = network_id = None
    if version >= config.vendor_id_version:
        vendor_id = byte_at(payload, pos)
        pos += 1
    if version >= config.networks_version:
        network_id = read_u32_be(payload, pos)
        pos += 4
    return vendor_id, network_id, pos


def adht_parse_request(pkt: PacketRecord, config: AdhtConfig | None = None) -> AdhtRequest | None:
    """Recognize an Azureus DHT request.

    The protocol version at byte 16 must lie in the configured range, the
    connection id must have its most significant bit set, and the node
    address must echo the packet's UDP source port.
    """
    config = config or AdhtConfig()
    payload = pkt.payload
    if pkt.proto is not Proto.UDP or len(payload) < 17:
        return None
    try:
        version = byte_at(payload, 16)
        if not config.min_version <= version <= config.max_version:
            return None
        connection_id = read_u64_be(payload, 0)
        if not connection_id & _CONNECTION_ID_MSB:
            return None
        vendor_id, network_id, pos = _skip_versioned_fields(payload, 17, version, config)
        local_version = None
        if version >= config.fix_originator_version:
            local_version = byte_at(payload, pos)
            pos += 1
        node_address, pos = _read_address(payload, pos)
        if node_address[1] != pkt.src_port:
            return None
        instance_id = read_u32_be(payload, pos)
        time = read_u64_be(payload, pos + 4)
        return AdhtRequest(
            connection_id=connection_id,
            action=read_u32_be(payload, 8),
            transaction_id=read_u32_be(payload, 12),
            protocol_version=version,
            node_address=node_address,
            instance_id=instance_id,
            time=time,
            vendor_id=vendor_id,
            network_id=network_id,
            local_protocol_version=local_version,
        )
    except WireRangeError:
        return None


def adht_register(
    request: AdhtRequest,
    requester: str,
    table: AdhtTransactionTable,
    ts: float,
) -> bool:
    """Remember a find-node or find-value request; other actions are ignored.

    Returns True when the request was registered.
    """
    if request.action not in table.config.reply_for:
        return False
    table.register(request, requester, ts)
    return True


def _read_entries(payload: bytes, pos: int, values: bool) -> list[Endpoint]:
    count = read_u16_be(payload, pos)
    pos += 2
    endpoints = []
    for _ in range(count):
        try:
            if values:
                value_length = read_u16_be(payload, pos + 8)
                pos += 8 + 2 + value_length
            endpoint, pos = _read_contact(payload, pos)
        except WireRangeError:
            break
        if endpoint is not None and is_usable_endpoint(endpoint):
            endpoints.append(endpoint)
    return endpoints


def adht_match_reply(
    pkt: PacketRecord, table: AdhtTransactionTable
) -> tuple[str, list[Endpoint]] | None:
    """Match an ADHT reply against the pending requests.

    Returns
    -------
    tuple[str, list[Endpoint]] or None
        The requester the reply answers and the endpoints it carries, or
        None when the packet answers no pending request.
    """
    config = table.config
    payload = pkt.payload
    if pkt.proto is not Proto.UDP or len(payload) < 17:
        return None
    try:
        pending = table.lookup(read_u32_be(payload, 4), pkt.ts)
        if pending is None:
            return None
        action = read_u32_be(payload, 0)
        if action != config.reply_for[pending.action]:
            return None
        if read_u64_be(payload, 8) != pending.connection_id:
            return None
        version = byte_at(payload, 16)
        _, _, pos = _skip_versioned_fields(payload, 17, version, config)
        pos += 4  # INSTANCE_ID
        has_values = False
        if action == config.find_value_reply:
            has_values = byte_at(payload, pos) == 1
            pos += 1
        return pending.requester, _read_entries(payload, pos, has_values)
    except WireRangeError:
        return None


def adht_parse_reply(pkt: PacketRecord, table: AdhtTransactionTable) -> list[Endpoint]:
    """Endpoints carried by an ADHT reply to a registered request, else []."""
    matched = adht_match_reply(pkt, table)
    return matched[1] if matched else []


def mdht_extract(pkt: PacketRecord) -> list[Endpoint]:
    """Extract endpoints from Mainline DHT ``values`` and ``nodes`` responses.

    ``values`` is a list of 6-byte compact peers; ``nodes`` is a string of
    26-byte entries (20-byte node id followed by a compact address).
    """
    if pkt.proto is not Proto.UDP or not pkt.payload:
        return []
    endpoints = []
    found = scan_for_value(pkt.payload, VALUES_MARKER)
    if found is not None and isinstance(found[0], list):
        for entry in found[0]:
            if isinstance(entry, bytes) and len(entry) == 6:
                endpoints.extend(compact_endpoints(entry))
    found = scan_for_value(pkt.payload, NODES_MARKER)
    if found is not None and isinstance(found[0], bytes):
        endpoints.extend(compact_endpoints(found[0], MDHT_NODE_SIZE))
    return endpoints


# --------------------------------------------------------------------------
# BTUDP signatures

_LENGTH_OPS = {
    "==": lambda n, v: n == v,
    ">=": lambda n, v: n >= v,
    "<=": lambda n, v: n <= v,
    ">": lambda n, v: n > v,
    "<": lambda n, v: n < v,
}
_SIGNATURE_LINE = re.compile(r"^(\S+)\s+len(==|>=|<=|>|<)(\d+)\s+((?:[0-9a-fA-F]{2}|\?\?){1,64})$")

DEFAULT_SIGNATURES = """\
# name       length     first bytes (?? = any)
mdht-ping    len==56    64313a61
utp-syn      len==20    4100????
utp-state    len==20    2100????
"""


class SignatureError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"signature line {lineno}: {message}")
        self.lineno = lineno


@dataclasses.dataclass(frozen=True)
class Signature:
    """Payload-length predicate plus a prefix pattern of up to 64 bytes."""

    name: str
    length_op: str
    length: int
    pattern: tuple[int | None, ...]

    def matches(self, payload: bytes) -> bool:
        if not _LENGTH_OPS[self.length_op](len(payload), self.length):
            return False
        if len(payload) < len(self.pattern):
            return False
        return all(want is None or payload[i] == want for i, want in enumerate(self.pattern))

    @classmethod
    def parse(cls, line: str, lineno: int = 0) -> "Signature":
        match = _SIGNATURE_LINE.match(line.strip())
        if not match:
            raise SignatureError(lineno, f"expected '<name> len<op><n> <hex>', got {line.strip()!r}")
        name, op, length, hex_pattern = match.groups()
        pattern = tuple(
            None if hex_pattern[i : i + 2] == "??" else int(hex_pattern[i : i + 2], 16)
            for i in range(0, len(hex_pattern), 2)
        )
        return cls(name, op, int(length), pattern)


class SignatureTable:
    """Ordered collection of BTUDP signatures."""

    def __init__(self, signatures: list[Signature] | None = None):
        self.signatures = list(signatures or [])

    def __len__(self) -> int:
        return len(self.signatures)

    @classmethod
    def from_lines(cls, lines) -> "SignatureTable":
        signatures = []
        for lineno, line in enumerate(lines, start=1):
            text = line.split("#", 1)[0].strip()
            if text:
                signatures.append(Signature.parse(text, lineno))
        return cls(signatures)

    @classmethod
    def default(cls) -> "SignatureTable":
        return cls.from_lines(DEFAULT_SIGNATURES.splitlines())

    @classmethod
    def load(cls, path: str) -> "SignatureTable":
        with open(path, encoding="utf-8") as f:
            table = cls.from_lines(f)
        logger.info("Loaded %d BTUDP signatures from %s", len(table), path)
        return table

    def match(self, payload: bytes) -> Signature | None:
        for signature in self.signatures:
            if signature.matches(payload):
                return signature
        return None


def btudp_match(pkt: PacketRecord, signatures: SignatureTable) -> bool:
    """True when a UDP packet matches one of the BTUDP signatures."""
    if pkt.proto is not Proto.UDP:
        return False
    return signatures.match(pkt.payload) is not None

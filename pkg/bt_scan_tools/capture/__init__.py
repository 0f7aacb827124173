"""Trace ingestion and connection-outcome tracking.

Packets come from classic pcap files (Ethernet, IPv4) or from NDJSON
fixtures and are normalized to :class:`PacketRecord`. A
:class:`ConnectionTracker` turns them into :class:`ConnectionEvent` records:
one ``attempted`` event when a connection starts and exactly one terminal
event (``established`` or ``failed``) per attempt.
"""

import dataclasses
import enum
import heapq
import ipaddress
import json
import logging
import math
import os
import socket
from collections.abc import Callable, Iterable, Iterator
from typing import BinaryIO, NamedTuple, TextIO

import dpkt

logger = logging.getLogger(__name__)

PCAP_MAGICS = (
    b"\xa1\xb2\xc3\xd4",
    b"\xd4\xc3\xb2\xa1",
    b"\xa1\xb2\x3c\x4d",
    b"\x4d\x3c\xb2\xa1",
)

_FLAG_LETTERS = {"S": "SYN", "A": "ACK", "R": "RST", "F": "FIN"}
_HEX_DIGITS = frozenset("0123456789abcdef")
_MAC_SRC = b"\x02\x00\x00\x00\x00\x01"
_MAC_DST = b"\x02\x00\x00\x00\x00\x02"


class UnsupportedFormatError(ValueError):
    """The input is not a trace format this module can read."""


class RecordError(ValueError):
    """One NDJSON line does not follow the packet schema."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class Proto(str, enum.Enum):
    TCP = "tcp"
    UDP = "udp"


class TcpFlags(enum.IntFlag):
    # bit values follow the TCP header
    NONE = 0
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    ACK = 0x10

    @classmethod
    def from_letters(cls, letters: str) -> "TcpFlags":
        flags = cls.NONE
        for letter in letters:
            if letter not in _FLAG_LETTERS:
                raise ValueError(f"unknown TCP flag letter {letter!r}")
            flags |= cls[_FLAG_LETTERS[letter]]
        return flags

    def letters(self) -> str:
        return "".join(
            letter for letter, name in _FLAG_LETTERS.items() if self & TcpFlags[name]
        )


_FLAG_MASK = int(TcpFlags.FIN | TcpFlags.SYN | TcpFlags.RST | TcpFlags.ACK)


class Outcome(str, enum.Enum):
    ATTEMPTED = "attempted"
    ESTABLISHED = "established"
    FAILED = "failed"


@dataclasses.dataclass(frozen=True, slots=True)
class PacketRecord:
    ts: float
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    proto: Proto
    tcp_flags: TcpFlags = TcpFlags.NONE
    payload: bytes = b""

    def __post_init__(self):
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 0xFFFF:
                raise ValueError(f"port {port} out of range")


class FlowKey(NamedTuple):
    """Connection 5-tuple with the initiator first."""

    initiator: str
    initiator_port: int
    responder: str
    responder_port: int
    proto: Proto


@dataclasses.dataclass(frozen=True, slots=True)
class ConnectionEvent:
    ts: float
    initiator: str
    responder: str
    responder_port: int
    proto: Proto
    outcome: Outcome

    @property
    def terminal(self) -> bool:
        return self.outcome is not Outcome.ATTEMPTED


@dataclasses.dataclass(frozen=True)
class CaptureConfig:
    """Settings for connection tracking.

    Parameters
    ----------
    handshake_timeout : float
        Seconds after the first packet of a connection within which the
        responder must answer; later answers count as a failed attempt.
    reorder_skew : float
        Seconds by which a packet may arrive after a later-stamped one.
        Other connections only time out once the newest timestamp seen is
        more than this past their deadline.
    idle_timeout : float
        Seconds without packets after which an established TCP connection
        or an answered UDP exchange is dropped from the table.
    """

    handshake_timeout: float = 30.0
    reorder_skew: float = 0.0
    idle_timeout: float = 600.0

    def __post_init__(self):
        for name in ("handshake_timeout", "idle_timeout"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be positive")
        if not math.isfinite(self.reorder_skew) or self.reorder_skew < 0:
            raise ValueError("reorder_skew must not be negative")

    @classmethod
    def from_dict(cls, values: dict) -> "CaptureConfig":
        unknown = set(values) - {field.name for field in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown capture settings: {', '.join(sorted(unknown))}")
        return cls(**values)

    def replace(self, **changes) -> "CaptureConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# pcap


def _record_from_frame(ts: float, buf: bytes) -> PacketRecord | None | bool:
    """Decode one Ethernet frame; False marks an IPv6 frame."""
    eth = dpkt.ethernet.Ethernet(buf)
    ip = eth.data
    if isinstance(ip, dpkt.ip6.IP6):
        return False
    if not isinstance(ip, dpkt.ip.IP):
        return None
    l4 = ip.data
    if isinstance(l4, dpkt.tcp.TCP):
        proto = Proto.TCP
        flags = TcpFlags(l4.flags & _FLAG_MASK)
    elif isinstance(l4, dpkt.udp.UDP):
        proto = Proto.UDP
        flags = TcpFlags.NONE
    else:
        return None
    return PacketRecord(
        ts=float(ts),
        src_ip=socket.inet_ntoa(ip.src),
        src_port=l4.sport,
        dst_ip=socket.inet_ntoa(ip.dst),
        dst_port=l4.dport,
        proto=proto,
        tcp_flags=flags,
        payload=bytes(l4.data),
    )


def ingest_pcap(source: BinaryIO, progress_callback=None) -> Iterator[PacketRecord]:
    """Read IPv4 TCP and UDP packets from a classic pcap stream.

    Both byte orders of the pcap magic are accepted. Frames that are not
    IPv4 TCP/UDP are skipped; IPv6 frames are counted and reported once.
    A record cut short in its header or its body ends the trace with a
    warning; the records before it are kept.

    Parameters
    ----------
    source : BinaryIO
        Binary stream positioned at the pcap global header.
    progress_callback : callable, optional
        Called with a progress message every 100,000 frames.

    Yields
    ------
    PacketRecord
        One record per IPv4 TCP/UDP packet, in file order.

    Raises
    ------
    UnsupportedFormatError
        If the global header is missing or has an unknown magic, or the
        link type is not Ethernet.
    """
    head = source.read(dpkt.pcap.FileHdr.__hdr_len__)
    magic = head[:4]
    if len(head) < dpkt.pcap.FileHdr.__hdr_len__ or magic not in PCAP_MAGICS:
        raise UnsupportedFormatError(f"not a pcap stream: magic {magic.hex() or 'missing'}")
    if magic in (b"\xa1\xb2\xc3\xd4", b"\xa1\xb2\x3c\x4d"):
        file_header, record_header = dpkt.pcap.FileHdr(head), dpkt.pcap.PktHdr
    else:
        file_header, record_header = dpkt.pcap.LEFileHdr(head), dpkt.pcap.LEPktHdr
    if file_header.linktype != dpkt.pcap.DLT_EN10MB:
        raise UnsupportedFormatError(f"unsupported link type {file_header.linktype}")
    divisor = 1e9 if magic in (b"\xa1\xb2\x3c\x4d", b"\x4d\x3c\xb2\xa1") else 1e6

    frames = 0
    ipv6_frames = 0
    while True:
        raw = source.read(record_header.__hdr_len__)
        if not raw:
            break
        if len(raw) < record_header.__hdr_len__:
            logger.warning("Truncated pcap record header after %d frames; trace is partial", frames)
            break
        header = record_header(raw)
        buf = source.read(header.caplen)
        if len(buf) < header.caplen:
            logger.warning(
                "Truncated pcap record after %d frames (%d of %d bytes); trace is partial",
                frames, len(buf), header.caplen,
            )
            break
        ts = header.tv_sec + header.tv_usec / divisor
        frames += 1
        if progress_callback and frames % 100_000 == 0:
            progress_callback(f"Read {frames} frames")
        try:
            record = _record_from_frame(ts, buf)
        except dpkt.UnpackError:
            logger.debug("Skipping undecodable frame %d", frames)
            continue
        if record is False:
            if not ipv6_frames:
                logger.warning("IPv6 is not supported; skipping IPv6 frames")
            ipv6_frames += 1
        elif record is not None:
            yield record
    if ipv6_frames:
        logger.debug("Skipped %d IPv6 frames", ipv6_frames)


def write_pcap(records: Iterable[PacketRecord], stream: BinaryIO) -> None:
    """Write records as Ethernet/IPv4 frames to a pcap stream."""
    writer = dpkt.pcap.Writer(stream, linktype=dpkt.pcap.DLT_EN10MB)
    for record in records:
        if record.proto is Proto.TCP:
            l4 = dpkt.tcp.TCP(
                sport=record.src_port,
                dport=record.dst_port,
                flags=int(record.tcp_flags),
                data=record.payload,
            )
            ip_proto = dpkt.ip.IP_PROTO_TCP
        else:
            l4 = dpkt.udp.UDP(sport=record.src_port, dport=record.dst_port, data=record.payload)
            l4.ulen = len(l4)
            ip_proto = dpkt.ip.IP_PROTO_UDP
        ip = dpkt.ip.IP(
            src=socket.inet_aton(record.src_ip),
            dst=socket.inet_aton(record.dst_ip),
            p=ip_proto,
            ttl=64,
            data=l4,
        )
        ip.len = len(ip)
        frame = dpkt.ethernet.Ethernet(
            src=_MAC_SRC, dst=_MAC_DST, type=dpkt.ethernet.ETH_TYPE_IP, data=ip
        )
        writer.writepkt(bytes(frame), ts=record.ts)


# --------------------------------------------------------------------------
# NDJSON


def _ipv4_field(entry: dict, name: str) -> str:
    value = entry.get(name)
    if not isinstance(value, str):
        raise ValueError(f"{name!r} must be a dotted-quad string")
    try:
        address = ipaddress.ip_address(value)
    except ValueError:
        raise ValueError(f"{name!r} is not an IP address: {value!r}") from None
    if address.version != 4:
        raise ValueError(f"{name!r}: IPv6 is not supported")
    return str(address)


def _port_field(entry: dict, name: str) -> int:
    value = entry.get(name)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"{name!r} must be an integer")
    if not 0 <= value <= 0xFFFF:
        raise ValueError(f"{name!r} out of range: {value}")
    return value


def parse_ndjson_record(entry: dict) -> PacketRecord:
    """Validate one decoded NDJSON object and build the record."""
    if not isinstance(entry, dict):
        raise ValueError("record is not a JSON object")
    ts = entry.get("ts")
    if isinstance(ts, bool) or not isinstance(ts, (int, float)):
        raise ValueError("'ts' must be a number")
    if not math.isfinite(ts):
        raise ValueError(f"'ts' must be finite, got {ts}")
    try:
        proto = Proto(entry.get("proto"))
    except ValueError:
        raise ValueError(f"'proto' must be 'tcp' or 'udp', got {entry.get('proto')!r}") from None
    letters = entry.get("flags", "")
    if not isinstance(letters, str):
        raise ValueError("'flags' must be a string")
    flags = TcpFlags.from_letters(letters)
    if proto is Proto.UDP and flags:
        raise ValueError("UDP records cannot carry TCP flags")
    payload_hex = entry.get("payload_hex", "")
    if (
        not isinstance(payload_hex, str)
        or len(payload_hex) % 2
        or not _HEX_DIGITS.issuperset(payload_hex)
    ):
        raise ValueError("'payload_hex' must be even-length lowercase hex")
    return PacketRecord(
        ts=float(ts),
        src_ip=_ipv4_field(entry, "src"),
        src_port=_port_field(entry, "sport"),
        dst_ip=_ipv4_field(entry, "dst"),
        dst_port=_port_field(entry, "dport"),
        proto=proto,
        tcp_flags=flags,
        payload=bytes.fromhex(payload_hex),
    )


def ingest_ndjson(
    source: TextIO | BinaryIO, error_callback: Callable[[RecordError], None] | None = None
) -> Iterator[PacketRecord]:
    """Read packet records from an NDJSON stream, one object per line.

    Lines that are not valid UTF-8 or JSON, or do not follow the schema,
    are reported (logged, and passed to ``error_callback`` when given) and
    skipped; the stream continues with the next line. Blank lines are
    ignored. Binary streams are decoded line by line.
    """
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            if isinstance(line, bytes):
                line = line.decode("utf-8")
            yield parse_ndjson_record(json.loads(line))
        except ValueError as e:
            error = RecordError(lineno, str(e))
            logger.warning("Skipping NDJSON record: %s", error)
            if error_callback:
                error_callback(error)


def record_to_dict(record: PacketRecord) -> dict:
    return {
        "ts": record.ts,
        "src": record.src_ip,
        "sport": record.src_port,
        "dst": record.dst_ip,
        "dport": record.dst_port,
        "proto": record.proto.value,
        "flags": record.tcp_flags.letters(),
        "payload_hex": record.payload.hex(),
    }


def write_ndjson(records: Iterable[PacketRecord], stream: TextIO) -> None:
    for record in records:
        stream.write(json.dumps(record_to_dict(record)) + "\n")


# --------------------------------------------------------------------------
# format detection


def detect_format(path: str) -> str:
    """Return ``"pcap"`` or ``"ndjson"`` for the trace at ``path``.

    pcap is recognized by its magic; otherwise the first non-blank line must
    parse as a JSON object. An empty file is an (empty) NDJSON trace.

    Raises
    ------
    UnsupportedFormatError
        If neither check succeeds.
    """
    with open(path, "rb") as f:
        head = f.read(4)
        if head in PCAP_MAGICS:
            return "pcap"
        f.seek(0)
        for raw in f:
            if not raw.strip():
                continue
            try:
                entry = json.loads(raw)
            except ValueError:
                break
            if isinstance(entry, dict):
                return "ndjson"
            break
        else:
            return "ndjson"
    raise UnsupportedFormatError(
        f"cannot tell the format of {path}; pass the format explicitly"
    )


def read_trace(path: str, fmt: str = "auto", progress_callback=None) -> list[PacketRecord]:
    """Load a whole trace file into memory."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Input trace not found: {path}")
    if fmt == "auto":
        fmt = detect_format(path)
    if fmt == "pcap":
        with open(path, "rb") as f:
            return list(ingest_pcap(f, progress_callback))
    if fmt == "ndjson":
        with open(path, "rb") as f:
            return list(ingest_ndjson(f))
    raise UnsupportedFormatError(f"unknown trace format {fmt!r}")


# --------------------------------------------------------------------------
# connection tracking


class _State(enum.Enum):
    SYN_SENT = 1
    SYNACK_RECEIVED = 2
    ESTABLISHED = 3
    UDP_PENDING = 4
    UDP_ANSWERED = 5


_PENDING = frozenset({_State.SYN_SENT, _State.SYNACK_RECEIVED, _State.UDP_PENDING})


@dataclasses.dataclass(slots=True)
class _Flow:
    first_ts: float
    state: _State
    last_ts: float

    def touch(self, ts: float) -> None:
        self.last_ts = max(self.last_ts, ts)


class ConnectionTracker:
    """Connection table for one trace.

    TCP connections start with a SYN without ACK. They are ``established``
    once the responder's SYN-ACK is acknowledged by the initiator and
    ``failed`` when the responder resets the attempt, the initiator resets
    a half-open handshake, or no handshake completes within
    ``handshake_timeout``. A UDP exchange starts with the first datagram
    of a (source, destination, destination port) triple, is ``established``
    by a datagram in the reverse direction and ``failed`` when none arrives
    within the timeout.

    Timeouts are checked lazily against the newest timestamp seen, less
    ``reorder_skew``, and for every pending connection by :meth:`flush`. A
    packet of a connection whose own deadline it has passed fails that
    connection first. Established and answered connections leave the table
    after ``idle_timeout`` without packets. Each event carries the timestamp
    of the connection's first packet.
    """

    def __init__(self, config: CaptureConfig | None = None):
        self.config = config or CaptureConfig()
        self._tcp: dict[FlowKey, _Flow] = {}
        self._udp: dict[tuple[str, str, int], _Flow] = {}
        self._deadlines: list[tuple[float, int, object, float]] = []
        self._sequence = 0
        self._latest = float("-inf")

    def __len__(self) -> int:
        return len(self._tcp) + len(self._udp)

    def _table(self, key) -> dict:
        return self._tcp if isinstance(key, FlowKey) else self._udp

    def _push(self, deadline: float, key, first_ts: float) -> None:
        self._sequence += 1
        heapq.heappush(self._deadlines, (deadline, self._sequence, key, first_ts))

    def _open(self, table: dict, key, ts: float, state: _State) -> _Flow:
        flow = table[key] = _Flow(ts, state, ts)
        self._push(ts + self.config.handshake_timeout, key, ts)
        return flow

    @staticmethod
    def _event(ts: float, initiator: str, responder: str, port: int, proto: Proto, outcome):
        return ConnectionEvent(ts, initiator, responder, port, proto, outcome)

    def _fail(self, key) -> ConnectionEvent:
        if isinstance(key, FlowKey):
            flow = self._tcp.pop(key)
            return self._event(
                flow.first_ts, key.initiator, key.responder, key.responder_port,
                Proto.TCP, Outcome.FAILED,
            )
        flow = self._udp.pop(key)
        src, dst, dport = key
        return self._event(flow.first_ts, src, dst, dport, Proto.UDP, Outcome.FAILED)

    def _lookup_tcp(self, pkt: PacketRecord) -> tuple[FlowKey, _Flow | None, bool]:
        forward = FlowKey(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port, Proto.TCP)
        flow = self._tcp.get(forward)
        if flow is not None:
            return forward, flow, True
        reverse = FlowKey(pkt.dst_ip, pkt.dst_port, pkt.src_ip, pkt.src_port, Proto.TCP)
        return reverse, self._tcp.get(reverse), False

    def _lookup_udp(self, pkt: PacketRecord) -> tuple[tuple[str, str, int], _Flow | None, bool]:
        forward = (pkt.src_ip, pkt.dst_ip, pkt.dst_port)
        flow = self._udp.get(forward)
        if flow is not None:
            return forward, flow, True
        reverse = (pkt.dst_ip, pkt.src_ip, pkt.src_port)
        return reverse, self._udp.get(reverse), False

    def expire(self, now: float) -> list[ConnectionEvent]:
        """Fail pending connections whose handshake deadline lies before ``now``.

        Established and answered connections idle since before
        ``now - idle_timeout`` are dropped without an event.
        """
        events = []
        idle = self.config.idle_timeout
        while self._deadlines and self._deadlines[0][0] < now:
            _, _, key, first_ts = heapq.heappop(self._deadlines)
            table = self._table(key)
            flow = table.get(key)
            if flow is None or flow.first_ts != first_ts:
                continue
            if flow.state in _PENDING:
                events.append(self._fail(key))
            elif flow.last_ts + idle < now:
                del table[key]
            else:
                self._push(flow.last_ts + idle, key, first_ts)
        return events

    def _expire_own(self, pkt: PacketRecord) -> ConnectionEvent | None:
        if pkt.proto is Proto.TCP:
            key, flow, _ = self._lookup_tcp(pkt)
        else:
            key, flow, _ = self._lookup_udp(pkt)
        if (
            flow is not None
            and flow.state in _PENDING
            and flow.first_ts + self.config.handshake_timeout < pkt.ts
        ):
            return self._fail(key)
        return None

    def track_tcp(self, pkt: PacketRecord) -> ConnectionEvent | None:
        """Advance the handshake state of the packet's connection.

        Returns
        -------
        ConnectionEvent or None
            ``attempted`` for the first SYN of a connection, a terminal
            event when the packet completes or aborts the handshake, None
            otherwise (retransmissions, data, unknown flag combinations).
        """
        flags = pkt.tcp_flags
        key, flow, from_initiator = self._lookup_tcp(pkt)

        if flow is None:
            if flags & TcpFlags.SYN and not flags & (TcpFlags.ACK | TcpFlags.RST):
                forward = FlowKey(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port, Proto.TCP)
                self._open(self._tcp, forward, pkt.ts, _State.SYN_SENT)
                return self._event(
                    pkt.ts, pkt.src_ip, pkt.dst_ip, pkt.dst_port, Proto.TCP, Outcome.ATTEMPTED
                )
            return None

        flow.touch(pkt.ts)
        if flow.state is _State.ESTABLISHED:
            if flags & (TcpFlags.FIN | TcpFlags.RST):
                del self._tcp[key]
            return None

        if from_initiator:
            if flow.state is _State.SYNACK_RECEIVED:
                if flags & TcpFlags.RST:
                    return self._fail(key)
                if flags & TcpFlags.ACK and not flags & TcpFlags.SYN:
                    flow.state = _State.ESTABLISHED
                    return self._event(
                        flow.first_ts, key.initiator, key.responder, key.responder_port,
                        Proto.TCP, Outcome.ESTABLISHED,
                    )
            return None

        if flags & TcpFlags.RST:
            return self._fail(key)
        if flow.state is _State.SYN_SENT and flags & TcpFlags.SYN and flags & TcpFlags.ACK:
            flow.state = _State.SYNACK_RECEIVED
        return None

    def track_udp(self, pkt: PacketRecord) -> ConnectionEvent | None:
        """Record a UDP datagram.

        Returns ``attempted`` for the first datagram of a triple,
        ``established`` for the first reverse-direction datagram of a
        pending triple and None for everything else.
        """
        key, flow, from_initiator = self._lookup_udp(pkt)
        if flow is None:
            forward = (pkt.src_ip, pkt.dst_ip, pkt.dst_port)
            self._open(self._udp, forward, pkt.ts, _State.UDP_PENDING)
            return self._event(
                pkt.ts, pkt.src_ip, pkt.dst_ip, pkt.dst_port, Proto.UDP, Outcome.ATTEMPTED
            )
        flow.touch(pkt.ts)
        if not from_initiator and flow.state is _State.UDP_PENDING:
            flow.state = _State.UDP_ANSWERED
            src, dst, dport = key
            return self._event(flow.first_ts, src, dst, dport, Proto.UDP, Outcome.ESTABLISHED)
        return None

    def process(self, pkt: PacketRecord) -> list[ConnectionEvent]:
        """Apply pending timeouts, then track ``pkt``."""
        self._latest = max(self._latest, pkt.ts)
        events = self.expire(self._latest - self.config.reorder_skew)
        late = self._expire_own(pkt)
        if late is not None:
            events.append(late)
        if pkt.proto is Proto.TCP:
            event = self.track_tcp(pkt)
        else:
            event = self.track_udp(pkt)
        if event is not None:
            events.append(event)
        return events

    def flush(self) -> list[ConnectionEvent]:
        """End of trace: every connection still waiting for its handshake fails."""
        pending = sorted(
            (flow.first_ts, index, key)
            for index, (key, flow) in enumerate(
                list(self._tcp.items()) + list(self._udp.items())
            )
            if flow.state in _PENDING
        )
        self._deadlines.clear()
        return [self._fail(key) for _, _, key in pending]


def track_connections(
    packets: Iterable[PacketRecord], config: CaptureConfig | None = None
) -> list[ConnectionEvent]:
    """Run a fresh :class:`ConnectionTracker` over a whole trace, flush included."""
    tracker = ConnectionTracker(config)
    events = []
    for pkt in packets:
        events.extend(tracker.process(pkt))
    events.extend(tracker.flush())
    return events

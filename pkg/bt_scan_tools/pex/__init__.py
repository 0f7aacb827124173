import dataclasses

from ..bencode import scan_for_value
from ..capture import PacketRecord, Proto
from ..wire import Endpoint, compact_endpoints

ADDED_MARKER = b"5:added"


@dataclasses.dataclass(frozen=True)
class PexAddedBatch:
    """Peers announced in one µTorrent peer-exchange message."""

    source: str
    peers: list[Endpoint]
    ts: float


def scan_utpex(pkt: PacketRecord) -> list[Endpoint]:
    """Extract the ``added`` peers of a µTorrent PEX message from one TCP packet.

    The marker may appear anywhere in the payload, so mid-stream captures
    work without tracking the extension handshake. ``added.f`` and
    ``dropped`` are ignored.
    """
    if pkt.proto is not Proto.TCP or not pkt.payload:
        return []
    found = scan_for_value(pkt.payload, ADDED_MARKER)
    if found is None or not isinstance(found[0], bytes):
        return []
    return compact_endpoints(found[0])


def added_batch(pkt: PacketRecord) -> PexAddedBatch | None:
    peers = scan_utpex(pkt)
    if not peers:
        return None
    return PexAddedBatch(source=pkt.src_ip, peers=peers, ts=pkt.ts)

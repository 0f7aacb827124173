"""The peer-mappings table.

For every source address it holds the (target address, target port)
pairs the source learned from coordination traffic, i.e. the connections
that source is predicted to attempt. Entries expire ``ttl`` seconds after
they were last seen and each source keeps at most ``max_per_source``
entries, dropping the oldest first.
"""

import collections
import dataclasses
import enum
import json
import logging
from typing import TextIO

logger = logging.getLogger(__name__)


class Provenance(str, enum.Enum):
    HTTP_TRACKER = "http_tracker"
    UDP_TRACKER = "udp_tracker"
    ADHT = "adht"
    MDHT = "mdht"
    BTUDP = "btudp"
    PEX = "pex"


@dataclasses.dataclass(frozen=True)
class PeerMapConfig:
    """Settings for the peer-mappings table.

    Parameters
    ----------
    ttl : float
        Seconds a mapping stays live after it was last seen.
    max_per_source : int
        Most mappings kept per source address.
    ip_only : bool
        Match predictions on the target address alone, ignoring the port.
    pex_credit_both : bool
        Credit PEX peers to the sender of the message as well as to its
        receiver.
    """

    ttl: float = 1800.0
    max_per_source: int = 50_000
    ip_only: bool = False
    pex_credit_both: bool = True

    def __post_init__(self):
        if self.ttl <= 0:
            raise ValueError("ttl must be positive")
        if self.max_per_source < 1:
            raise ValueError("max_per_source must be at least 1")


@dataclasses.dataclass
class PredictedPeer:
    target_ip: str
    target_port: int
    provenance: Provenance
    first_seen: float
    last_seen: float | None = None

    def __post_init__(self):
        if self.last_seen is None:
            self.last_seen = self.first_seen

    @property
    def key(self) -> tuple[str, int]:
        return self.target_ip, self.target_port

    def live_at(self, now: float, ttl: float) -> bool:
        return self.first_seen <= now <= self.last_seen + ttl


@dataclasses.dataclass
class PeerMapStats:
    by_provenance: dict[str, int]
    by_source: dict[str, int]
    rejected: int

    @property
    def total(self) -> int:
        return sum(self.by_provenance.values())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"total": self.total}


class PeerMappings:
    """Per-source predicted connection targets."""

    def __init__(self, config: PeerMapConfig | None = None):
        self.config = config or PeerMapConfig()
        self._by_source: dict[str, collections.OrderedDict[tuple[str, int], PredictedPeer]] = {}
        # source -> target address -> ports, for ip-only matching
        self._ports: dict[str, dict[str, set[int]]] = {}
        self.rejected = 0
        self.evicted = 0

    def __len__(self) -> int:
        return sum(len(peers) for peers in self._by_source.values())

    def __contains__(self, source: str) -> bool:
        return source in self._by_source

    def add(self, source: str, peer: PredictedPeer) -> bool:
        """Record ``peer`` as a predicted target of ``source``.

        Adding a pair that is already present keeps its provenance and
        first-seen time and refreshes its last-seen time.

        Returns
        -------
        bool
            True when a new mapping was created.
        """
        if peer.target_port == 0:
            self.rejected += 1
            return False
        peers = self._by_source.setdefault(source, collections.OrderedDict())
        existing = peers.get(peer.key)
        if existing is not None:
            existing.last_seen = max(existing.last_seen, peer.last_seen)
            existing.first_seen = min(existing.first_seen, peer.first_seen)
            return False
        peers[peer.key] = peer
        self._ports.setdefault(source, {}).setdefault(peer.target_ip, set()).add(peer.target_port)
        if len(peers) > self.config.max_per_source:
            (old_ip, old_port), _ = peers.popitem(last=False)
            ports = self._ports[source][old_ip]
            ports.discard(old_port)
            if not ports:
                del self._ports[source][old_ip]
            self.evicted += 1
            logger.debug("Mapping cap reached for %s; evicted %s:%d", source, old_ip, old_port)
        return True

    def is_predicted(self, source: str, dst: str, dport: int, now: float) -> bool:
        """True when ``source`` has a live mapping for ``(dst, dport)`` at ``now``."""
        peers = self._by_source.get(source)
        if not peers:
            return False
        if self.config.ip_only:
            ports = self._ports[source].get(dst, ())
            return any(peers[(dst, port)].live_at(now, self.config.ttl) for port in ports)
        peer = peers.get((dst, dport))
        return peer is not None and peer.live_at(now, self.config.ttl)

    def peers_of(self, source: str) -> list[PredictedPeer]:
        return list(self._by_source.get(source, {}).values())

    def stats(self) -> PeerMapStats:
        by_provenance = {provenance.value: 0 for provenance in Provenance}
        by_source = {}
        for source, peers in self._by_source.items():
            by_source[source] = len(peers)
            for peer in peers.values():
                by_provenance[peer.provenance.value] += 1
        return PeerMapStats(by_provenance, by_source, self.rejected)

    def export_ndjson(self, stream: TextIO) -> int:
        """Write one line per mapping; returns the number of lines written."""
        count = 0
        for source in sorted(self._by_source):
            for peer in self._by_source[source].values():
                stream.write(
                    json.dumps(
                        {
                            "source": source,
                            "target": peer.target_ip,
                            "port": peer.target_port,
                            "provenance": peer.provenance.value,
                            "first_seen": peer.first_seen,
                        }
                    )
                    + "\n"
                )
                count += 1
        return count

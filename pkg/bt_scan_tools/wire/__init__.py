import socket

import numpy as np

# (address, port) as carried by every peer list
Endpoint = tuple[str, int]

COMPACT_PEER_SIZE = 6


class WireRangeError(IndexError):
    """Raised when a read or slice falls outside the byte string."""


def _check_range(data: bytes, offset: int, width: int) -> None:
    if offset < 0 or offset + width > len(data):
        raise WireRangeError(
            f"cannot read {width} byte(s) at offset {offset} of a {len(data)}-byte string"
        )


def read_u16_be(data: bytes, offset: int = 0) -> int:
    """Interpret two bytes at ``offset`` as an unsigned integer in network byte order.

    Parameters
    ----------
    data : bytes
        Source byte string.
    offset : int
        0-based index of the first byte.

    Returns
    -------
    int
        Value in [0, 65535].

    Raises
    ------
    WireRangeError
        If ``offset + 2`` exceeds the length of ``data``.
    """
    _check_range(data, offset, 2)
    return (data[offset] << 8) | data[offset + 1]


def read_u32_be(data: bytes, offset: int = 0) -> int:
    """Interpret four bytes at ``offset`` as an unsigned integer in network byte order."""
    _check_range(data, offset, 4)
    return int.from_bytes(data[offset : offset + 4], "big")


def read_u64_be(data: bytes, offset: int = 0) -> int:
    _check_range(data, offset, 8)
    return int.from_bytes(data[offset : offset + 8], "big")


def slice_bytes(data: bytes, start: int, end: int) -> bytes:
    """Return bytes ``[start, end)`` of ``data``.

    Indices are 0-based and half-open for every start value; there is no
    adjustment of positive indices.

    Raises
    ------
    WireRangeError
        If ``start > end``, ``start < 0`` or ``end`` exceeds the length of ``data``.
    """
    if start < 0 or start > end or end > len(data):
        raise WireRangeError(
            f"invalid slice [{start}, {end}) of a {len(data)}-byte string"
        )
    return bytes(data[start:end])


def byte_at(data: bytes, idx: int) -> int:
    """Return the unsigned value of the byte at ``idx``."""
    _check_range(data, idx, 1)
    return data[idx]


def bytes_as_uints(data: bytes) -> np.ndarray:
    """Return the bytes of ``data`` as a vector of unsigned 8-bit integers."""
    return np.frombuffer(bytes(data), dtype=np.uint8)


def ipv4_at(data: bytes, offset: int) -> str:
    """Dotted-quad form of the four bytes at ``offset``."""
    _check_range(data, offset, 4)
    return socket.inet_ntoa(data[offset : offset + 4])


def ipv6_at(data: bytes, offset: int) -> str:
    _check_range(data, offset, 16)
    return socket.inet_ntop(socket.AF_INET6, data[offset : offset + 16])


def is_usable_endpoint(endpoint: Endpoint) -> bool:
    """False for endpoints that can never be a connection target (port 0, 0.0.0.0)."""
    address, port = endpoint
    return 0 < port <= 0xFFFF and address not in ("0.0.0.0", "::")


def compact_endpoints(blob: bytes, stride: int = COMPACT_PEER_SIZE) -> list[Endpoint]:
    """Decode a run of compact IPv4 peer entries.

    Each entry is ``stride`` bytes long and ends with the 4-byte address and
    the 2-byte big-endian port (``stride`` 6 for peer lists, 26 for DHT node
    lists whose entries start with a 20-byte node id).

    Returns an empty list when the length of ``blob`` is not a multiple of
    ``stride``. Unusable endpoints are dropped.
    """
    if stride < COMPACT_PEER_SIZE or len(blob) % stride:
        return []
    skip = stride - COMPACT_PEER_SIZE
    endpoints = []
    for base in range(0, len(blob), stride):
        endpoint = (ipv4_at(blob, base + skip), read_u16_be(blob, base + skip + 4))
        if is_usable_endpoint(endpoint):
            endpoints.append(endpoint)
    return endpoints


def pack_compact(endpoints: list[Endpoint]) -> bytes:
    """Inverse of :func:`compact_endpoints` for 6-byte entries."""
    return b"".join(
        socket.inet_aton(address) + port.to_bytes(2, "big") for address, port in endpoints
    )

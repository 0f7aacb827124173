import numpy as np
import pytest

from bt_scan_tools.wire import (
    WireRangeError,
    byte_at,
    bytes_as_uints,
    compact_endpoints,
    ipv4_at,
    ipv6_at,
    is_usable_endpoint,
    pack_compact,
    read_u16_be,
    read_u32_be,
    read_u64_be,
    slice_bytes,
)


def test_read_u16_be():
    """Test reading 16-bit big-endian integers."""
    assert read_u16_be(bytes([0x1A, 0xE1]), 0) == 6881
    assert read_u16_be(bytes([0x00, 0x00]), 0) == 0
    assert read_u16_be(bytes([0xFF, 0xFF, 0x01]), 1) == 65281

    # Reads past the end fail instead of returning partial values
    with pytest.raises(WireRangeError):
        read_u16_be(bytes([0x1A]), 0)
    with pytest.raises(WireRangeError):
        read_u16_be(bytes([0x1A, 0xE1]), 1)
    with pytest.raises(WireRangeError):
        read_u16_be(bytes([0x1A, 0xE1]), -1)


def test_read_u32_and_u64_be():
    """Test reading 32 and 64-bit big-endian integers."""
    assert read_u32_be(bytes([0, 0, 0, 1])) == 1
    assert read_u32_be(bytes([0x0A, 0x00, 0x00, 0x01])) == 167772161
    assert read_u32_be(bytes([0xFF] * 4)) == 4294967295
    assert read_u64_be(bytes([0x80] + [0] * 7)) == 1 << 63
    assert read_u64_be(b"\x00" * 4 + bytes([0, 0, 0x1A, 0xE1]), 0) == 6881

    with pytest.raises(WireRangeError):
        read_u32_be(bytes(3))
    with pytest.raises(WireRangeError):
        read_u64_be(bytes(10), 3)


def test_slice_bytes():
    """Test half-open slicing and its range checks."""
    data = b"abcdef"
    assert slice_bytes(data, 1, 3) == b"bc"
    assert slice_bytes(data, 0, 0) == b""
    assert slice_bytes(data, 0, len(data)) == data
    assert slice_bytes(data, 6, 6) == b""

    for start, end in [(3, 2), (0, 7), (-1, 2)]:
        with pytest.raises(WireRangeError):
            slice_bytes(data, start, end)


def test_byte_at():
    """Test single byte access."""
    assert byte_at(b"abc", 1) == 98
    # High bit set must not sign-extend
    assert byte_at(bytes([0x80]), 0) == 128

    with pytest.raises(WireRangeError):
        byte_at(b"", 0)


def test_bytes_as_uints():
    """Test conversion of byte strings to unsigned 8-bit vectors."""
    result = bytes_as_uints(b"ab")
    assert result.dtype == np.uint8
    assert result.tolist() == [97, 98]
    assert bytes_as_uints(b"").tolist() == []
    assert bytes_as_uints(bytes([0x00, 0xFF])).tolist() == [0, 255]


def test_addresses():
    """Test IPv4 and IPv6 address extraction."""
    assert ipv4_at(bytes([0xFF, 10, 0, 0, 1]), 1) == "10.0.0.1"
    assert ipv6_at(bytes(15) + b"\x01", 0) == "::1"

    with pytest.raises(WireRangeError):
        ipv4_at(bytes([10, 0, 0]), 0)


def test_is_usable_endpoint():
    """Test that port 0 and unspecified addresses are unusable."""
    assert is_usable_endpoint(("10.0.0.1", 6881))
    assert not is_usable_endpoint(("10.0.0.1", 0))
    assert not is_usable_endpoint(("0.0.0.0", 6881))
    assert not is_usable_endpoint(("::", 6881))


def test_compact_endpoints():
    """Test decoding of compact peer lists."""
    blob = bytes([10, 0, 0, 1, 0x1A, 0xE1, 10, 0, 0, 2, 0x1A, 0x0C])
    assert compact_endpoints(blob) == [("10.0.0.1", 6881), ("10.0.0.2", 6668)]

    # Lengths that are not a multiple of the entry size yield nothing
    assert compact_endpoints(blob[:-1]) == []
    assert compact_endpoints(b"") == []

    # Port 0 entries are dropped
    assert compact_endpoints(bytes([10, 0, 0, 3, 0, 0])) == []

    # 26-byte node entries skip their 20-byte node id
    node = bytes(range(20)) + bytes([192, 0, 2, 7, 0x1A, 0xE1])
    assert compact_endpoints(node, 26) == [("192.0.2.7", 6881)]
    assert compact_endpoints(node, 5) == []


def test_pack_compact():
    """Test that packed peers decode to the same endpoints."""
    peers = [("10.0.0.1", 6881), ("100.64.3.4", 51413)]
    packed = pack_compact(peers)
    assert len(packed) == 12
    assert packed[:6] == bytes([10, 0, 0, 1, 0x1A, 0xE1])
    assert compact_endpoints(packed) == peers

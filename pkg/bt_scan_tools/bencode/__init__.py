"""Decoder and encoder for the bencode ("benc") format.

Values map onto Python types: integers to ``int``, byte strings to
``bytes``, lists to ``list`` and dictionaries to ``dict`` with ``bytes``
keys. Decoding keeps dictionary keys in the order found; encoding emits
them sorted, as required for canonical output.
"""

from typing import Union

import bencodepy

BencValue = Union[int, bytes, list["BencValue"], dict[bytes, "BencValue"]]

MAX_DEPTH = 32
INT_MIN = -(2**63)
INT_MAX = 2**63 - 1

_DIGITS = frozenset(b"0123456789")


class BencodeError(ValueError):
    """Malformed bencoded data; ``offset`` points at the offending byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


def _digits_end(data: bytes, start: int) -> int:
    end = start
    while end < len(data) and data[end] in _DIGITS:
        end += 1
    return end


def _decode_int(data: bytes, pos: int) -> tuple[int, int]:
    # data[pos] == ord("i")
    start = pos + 1
    negative = start < len(data) and data[start] == ord("-")
    digits_start = start + 1 if negative else start
    end = _digits_end(data, digits_start)
    if end >= len(data):
        raise BencodeError("truncated integer", pos)
    if data[end] != ord("e"):
        raise BencodeError("non-digit in integer", end)
    digits = data[digits_start:end]
    if not digits:
        raise BencodeError("empty integer", pos)
    if digits[0] == ord("0") and (len(digits) > 1 or negative):
        raise BencodeError("non-canonical integer", digits_start)
    if len(digits) > 19:
        raise BencodeError("integer exceeds 64 bits", digits_start)
    value = int(digits)
    if negative:
        value = -value
    if not INT_MIN <= value <= INT_MAX:
        raise BencodeError("integer exceeds 64 bits", digits_start)
    return value, end + 1


def _decode_bytes(data: bytes, pos: int) -> tuple[bytes, int]:
    if data[pos] == ord("-"):
        raise BencodeError("negative string length", pos)
    end = _digits_end(data, pos)
    if end >= len(data):
        raise BencodeError("truncated string length", pos)
    if data[end] != ord(":"):
        raise BencodeError("non-digit in string length", end)
    if end - pos > len(str(len(data))):
        raise BencodeError("truncated string", pos)
    length = int(data[pos:end])
    start = end + 1
    if start + length > len(data):
        raise BencodeError("truncated string", pos)
    return bytes(data[start : start + length]), start + length


def _decode_value(data: bytes, pos: int, depth: int) -> tuple[BencValue, int]:
    if pos >= len(data):
        raise BencodeError("truncated value", pos)
    lead = data[pos]
    if lead == ord("i"):
        return _decode_int(data, pos)
    if lead in _DIGITS or lead == ord("-"):
        return _decode_bytes(data, pos)
    if lead not in (ord("l"), ord("d")):
        raise BencodeError(f"unexpected byte 0x{lead:02x}", pos)
    if depth >= MAX_DEPTH:
        raise BencodeError("nesting too deep", pos)

    pos += 1
    if lead == ord("l"):
        items = []
        while True:
            if pos >= len(data):
                raise BencodeError("truncated list", pos)
            if data[pos] == ord("e"):
                return items, pos + 1
            item, pos = _decode_value(data, pos, depth + 1)
            items.append(item)

    entries = {}
    while True:
        if pos >= len(data):
            raise BencodeError("truncated dictionary", pos)
        if data[pos] == ord("e"):
            return entries, pos + 1
        if data[pos] not in _DIGITS:
            raise BencodeError("dictionary key is not a string", pos)
        key, pos = _decode_bytes(data, pos)
        entries[key], pos = _decode_value(data, pos, depth + 1)


def decode(data: bytes, offset: int = 0) -> tuple[BencValue, int]:
    """Decode one complete value starting at ``offset``.

    Trailing bytes after the value are allowed.

    Parameters
    ----------
    data : bytes
        Buffer holding the encoded value.
    offset : int, optional
        Index of the first byte of the value.

    Returns
    -------
    tuple[BencValue, int]
        The decoded value and the number of bytes it occupied.

    Raises
    ------
    BencodeError
        On truncation, malformed lengths or integers, integers outside the
        signed 64-bit range, or nesting deeper than ``MAX_DEPTH``.
    """
    data = bytes(data)
    value, end = _decode_value(data, offset, 0)
    return value, end - offset


def encode(value: BencValue) -> bytes:
    """Canonical encoding of ``value`` (dictionary keys in byte order)."""
    return bencodepy.encode(value)


def scan_for_value(data: bytes, marker: bytes) -> tuple[BencValue, int] | None:
    """Find ``marker`` anywhere in ``data`` and decode the value that follows it.

    ``marker`` is an encoded dictionary key such as ``b"5:peers"``. Only the
    first occurrence is decoded, so the work stays linear in ``len(data)``.

    Returns
    -------
    tuple[BencValue, int] or None
        The value and the offset at which it starts, or None when the
        marker is missing or not followed by a decodable value.
    """
    data = bytes(data)
    pos = data.find(marker)
    if pos == -1:
        return None
    start = pos + len(marker)
    try:
        value, _ = decode(data, start)
    except BencodeError:
        return None
    return value, start

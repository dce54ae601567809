"""Internet (RFC 1071) checksums for IPv4 headers and TCP/UDP segments."""

from __future__ import annotations

import struct

import numpy as np


def ones_complement_sum(data: bytes) -> int:
    """16-bit ones'-complement sum of ``data`` (odd length is zero padded)."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    words = np.frombuffer(bytes(data), dtype=">u2")
    total = int(words.sum(dtype=np.uint64))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def internet_checksum(data: bytes) -> int:
    return ~ones_complement_sum(data) & 0xFFFF


def ipv4_header_checksum(header: bytes) -> int:
    """Checksum of an IPv4 header; the checksum field itself is ignored."""
    buf = bytearray(header)
    buf[10:12] = b"\x00\x00"
    return internet_checksum(bytes(buf))


def transport_checksum(src: bytes, dst: bytes, proto: int, segment: bytes, checksum_offset: int) -> int:
    """TCP/UDP checksum over the IPv4 pseudo-header plus ``segment``.

    ``checksum_offset`` is the position of the checksum field inside the segment
    (16 for TCP, 6 for UDP); it is treated as zero during summation.
    """
    seg = bytearray(segment)
    seg[checksum_offset:checksum_offset + 2] = b"\x00\x00"
    pseudo = struct.pack("!4s4sBBH", bytes(src), bytes(dst), 0, proto, len(seg))
    value = internet_checksum(pseudo + bytes(seg))
    if proto == 17 and value == 0:
        # UDP transmits an all-zero result as 0xFFFF (zero means "no checksum")
        value = 0xFFFF
    return value

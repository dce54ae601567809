"""Capture file I/O: reading pcap/pcapng via dpkt, writing classic pcap."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import dpkt

from ..errors import ToolUnavailable

PCAP_MAGIC_USEC = 0xA1B2C3D4


def read_capture(path: str | Path) -> Iterator[tuple[int, float, bytes, int]]:
    """Yield ``(capture_index, timestamp, frame, link_type)``; indices start at 1."""
    path = Path(path)
    if not path.is_file():
        raise ToolUnavailable(f"capture not found: {path}")
    with open(path, "rb") as fh:
        try:
            reader = dpkt.pcap.UniversalReader(fh)
        except (ValueError, dpkt.NeedData) as exc:
            raise ToolUnavailable(f"not a pcap/pcapng file: {path} ({exc})") from exc
        link_type = reader.datalink()
        for index, (ts, frame) in enumerate(reader, start=1):
            yield index, float(ts), bytes(frame), link_type


class PcapWriter:
    """Little-endian microsecond pcap writer with integer timestamps."""

    def __init__(self, fh: BinaryIO, link_type: int = 1, snaplen: int = 65535):
        self._fh = fh
        fh.write(struct.pack("<IHHiIII", PCAP_MAGIC_USEC, 2, 4, 0, 0, snaplen, link_type))

    def write(self, ts_usec: int, frame: bytes, orig_len: int | None = None) -> None:
        sec, usec = divmod(int(ts_usec), 1_000_000)
        n = len(frame)
        self._fh.write(struct.pack("<IIII", sec, usec, n, n if orig_len is None else orig_len))
        self._fh.write(frame)


def write_pcap(path: str | Path, frames: Iterable[tuple[int, bytes]], link_type: int = 1) -> int:
    """Write ``(timestamp_usec, frame)`` pairs; returns the packet count."""
    count = 0
    with open(path, "wb") as fh:
        writer = PcapWriter(fh, link_type)
        for ts_usec, frame in frames:
            writer.write(ts_usec, frame)
            count += 1
    return count

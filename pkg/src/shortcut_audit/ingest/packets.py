"""Packet-level data types and the built-in IPv4/TCP/UDP parser.

The parser exists because occlusion needs exact byte offsets of header fields,
which field-level dissector output does not carry.  It only understands the
handful of layers that the occlusion field set lives in.
"""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass, field
from functools import lru_cache

from ..errors import Truncated, Unsupported

FORWARD = "forward"
REVERSE = "reverse"


class LinkType(enum.IntEnum):
    ETHERNET = 1
    RAW = 101
    # BSD/OpenBSD values that also carry bare IP packets
    RAW_BSD12 = 12
    RAW_BSD14 = 14

    @classmethod
    def coerce(cls, value: int) -> "LinkType":
        try:
            return cls(int(value))
        except ValueError:
            raise Unsupported(f"link type {value} not supported") from None


_ETH_LEN = 14
_ETHERTYPE_IPV4 = 0x0800
_ETHERTYPE_VLAN = (0x8100, 0x88A8)


@lru_cache(maxsize=1 << 16)
def ip_to_int(ip: str) -> int:
    return int(ipaddress.IPv4Address(ip))


@lru_cache(maxsize=1 << 16)
def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


@dataclass(frozen=True, order=False)
class FlowKey:
    """Canonical bidirectional 5-tuple: ``endpoint_a`` sorts before ``endpoint_b``."""

    endpoint_a: tuple[str, int]
    endpoint_b: tuple[str, int]
    transport: str

    @classmethod
    def from_endpoints(cls, src: tuple[str, int], dst: tuple[str, int], transport: str) -> "FlowKey":
        if _endpoint_sort_key(dst) < _endpoint_sort_key(src):
            src, dst = dst, src
        return cls(src, dst, transport)

    def __str__(self) -> str:
        (ip_a, port_a), (ip_b, port_b) = self.endpoint_a, self.endpoint_b
        return f"{self.transport}:{ip_a}:{port_a}-{ip_b}:{port_b}"


def _endpoint_sort_key(endpoint: tuple[str, int]) -> tuple[int, int]:
    return ip_to_int(endpoint[0]), int(endpoint[1])


@dataclass(slots=True)
class PacketRecord:
    """One dissected packet: dotted field names mapped to raw string values.

    Fields that did not occur in the packet are simply absent from ``fields``.
    """

    capture_index: int
    timestamp: float
    fields: dict[str, str]
    flow_key: FlowKey | None = None
    direction: str = FORWARD
    source: str = ""


def flow_key_from_fields(fields: dict[str, str]) -> tuple[FlowKey, str] | None:
    """Derive the canonical flow key and the packet's orientation relative to it."""
    src, dst = fields.get("ip.src"), fields.get("ip.dst")
    if not src or not dst:
        return None
    for transport, prefix in (("TCP", "tcp"), ("UDP", "udp")):
        sport, dport = fields.get(f"{prefix}.srcport"), fields.get(f"{prefix}.dstport")
        if sport and dport:
            try:
                a = (src, int(sport))
                b = (dst, int(dport))
                key = FlowKey.from_endpoints(a, b, transport)
            except ValueError:
                return None
            return key, FORWARD if key.endpoint_a == a else REVERSE
    return None


@dataclass
class ParsedPacket:
    """Byte-level view of one packet, starting at the IP header.

    ``field_offsets`` locate fields inside ``header_bytes``; ``payload_offsets``
    locate fields (the TLS SNI hostname) inside ``payload_bytes``.
    """

    link_type: LinkType
    header_bytes: bytes
    payload_bytes: bytes
    field_offsets: dict[str, tuple[int, int]]
    parsed_values: dict[str, int]
    payload_offsets: dict[str, tuple[int, int]] = field(default_factory=dict)
    transport: str | None = None
    ip_header_len: int = 20
    transport_header_len: int = 0
    ip_total_length: int = 0
    eth_src: str | None = None
    eth_dst: str | None = None
    sni: str | None = None

    @property
    def payload_length(self) -> int:
        """Transport payload length claimed by the IP header (may exceed what was captured)."""
        return max(self.ip_total_length - self.ip_header_len - self.transport_header_len, 0)

    @property
    def payload_truncated(self) -> bool:
        return len(self.payload_bytes) < self.payload_length

    def read_field(self, name: str) -> int:
        start, length = self.field_offsets[name]
        return int.from_bytes(self.header_bytes[start:start + length], "big")


SNI_FIELD = "tls.handshake.extensions_server_name"

# fields the inline parser can locate byte-exactly
IP_FIELDS = ("ip.dsfield", "ip.len", "ip.id", "ip.ttl", "ip.proto", "ip.checksum", "ip.src", "ip.dst")
TCP_FIELDS = (
    "tcp.srcport", "tcp.dstport", "tcp.seq_raw", "tcp.ack_raw", "tcp.flags",
    "tcp.window_size", "tcp.checksum", "tcp.urgent_pointer",
    "tcp.options.mss_val", "tcp.options.wscale.shift",
    "tcp.options.timestamp.tsval", "tcp.options.timestamp.tsecr",
)
UDP_FIELDS = ("udp.srcport", "udp.dstport", "udp.length", "udp.checksum")
KNOWN_FIELDS = frozenset(IP_FIELDS + TCP_FIELDS + UDP_FIELDS + (SNI_FIELD,))


def _mac(raw: bytes) -> str:
    return raw.hex(":")


def parse_packet_inline(raw_frame: bytes, link_type: int) -> ParsedPacket:
    """Parse one captured frame into header/payload bytes with field offsets.

    Raises ``Truncated`` when a header is cut short and ``Unsupported`` for
    anything that is not IPv4 over Ethernet or raw IP.
    """
    lt = LinkType.coerce(link_type)
    frame = bytes(raw_frame)
    eth_src = eth_dst = None
    if lt is LinkType.ETHERNET:
        if len(frame) < _ETH_LEN:
            raise Truncated(f"frame of {len(frame)} bytes shorter than Ethernet header")
        eth_dst, eth_src = _mac(frame[0:6]), _mac(frame[6:12])
        ethertype = struct.unpack_from("!H", frame, 12)[0]
        pos = _ETH_LEN
        while ethertype in _ETHERTYPE_VLAN:
            if len(frame) < pos + 4:
                raise Truncated("truncated VLAN tag")
            ethertype = struct.unpack_from("!H", frame, pos + 2)[0]
            pos += 4
        if ethertype != _ETHERTYPE_IPV4:
            raise Unsupported(f"ethertype 0x{ethertype:04x}")
        ip = frame[pos:]
    else:
        ip = frame

    if len(ip) < 1:
        raise Truncated("empty IP packet")
    version = ip[0] >> 4
    if version != 4:
        raise Unsupported(f"IP version {version}")
    if len(ip) < 20:
        raise Truncated(f"IPv4 header needs 20 bytes, have {len(ip)}")
    ihl = (ip[0] & 0x0F) * 4
    if ihl < 20:
        raise Unsupported(f"invalid IHL {ihl // 4}")
    if len(ip) < ihl:
        raise Truncated(f"IPv4 header with options needs {ihl} bytes, have {len(ip)}")
    total_length = struct.unpack_from("!H", ip, 2)[0]
    proto = ip[9]
    frag = struct.unpack_from("!H", ip, 6)[0] & 0x1FFF

    offsets: dict[str, tuple[int, int]] = {
        "ip.dsfield": (1, 1), "ip.len": (2, 2), "ip.id": (4, 2), "ip.ttl": (8, 1),
        "ip.proto": (9, 1), "ip.checksum": (10, 2), "ip.src": (12, 4), "ip.dst": (16, 4),
    }
    transport = None
    thl = 0
    t = ihl
    if frag == 0 and proto == 6:
        transport = "TCP"
        if len(ip) < t + 20:
            raise Truncated("TCP header truncated")
        thl = (ip[t + 12] >> 4) * 4
        if thl < 20:
            raise Unsupported(f"invalid TCP data offset {thl // 4}")
        if len(ip) < t + thl:
            raise Truncated("TCP options truncated")
        offsets.update({
            "tcp.srcport": (t, 2), "tcp.dstport": (t + 2, 2), "tcp.seq_raw": (t + 4, 4),
            "tcp.ack_raw": (t + 8, 4), "tcp.flags": (t + 13, 1), "tcp.window_size": (t + 14, 2),
            "tcp.checksum": (t + 16, 2), "tcp.urgent_pointer": (t + 18, 2),
        })
        offsets.update(_scan_tcp_options(ip, t + 20, t + thl))
    elif frag == 0 and proto == 17:
        transport = "UDP"
        thl = 8
        if len(ip) < t + 8:
            raise Truncated("UDP header truncated")
        offsets.update({
            "udp.srcport": (t, 2), "udp.dstport": (t + 2, 2),
            "udp.length": (t + 4, 2), "udp.checksum": (t + 6, 2),
        })

    header = ip[:ihl + thl]
    payload_end = min(len(ip), max(total_length, ihl + thl))
    payload = ip[ihl + thl:payload_end]
    values = {name: int.from_bytes(header[s:s + n], "big") for name, (s, n) in offsets.items()}

    pkt = ParsedPacket(
        link_type=lt,
        header_bytes=header,
        payload_bytes=payload,
        field_offsets=offsets,
        parsed_values=values,
        transport=transport,
        ip_header_len=ihl,
        transport_header_len=thl,
        ip_total_length=total_length,
        eth_src=eth_src,
        eth_dst=eth_dst,
    )
    if transport == "TCP" and payload:
        found = find_sni(payload)
        if found is not None:
            start, length = found
            pkt.payload_offsets[SNI_FIELD] = (start, length)
            pkt.sni = payload[start:start + length].decode("ascii", errors="replace")
    return pkt


def _scan_tcp_options(ip: bytes, start: int, end: int) -> dict[str, tuple[int, int]]:
    found: dict[str, tuple[int, int]] = {}
    i = start
    while i < end:
        kind = ip[i]
        if kind == 0:
            break
        if kind == 1:
            i += 1
            continue
        if i + 1 >= end:
            break
        length = ip[i + 1]
        if length < 2 or i + length > end:
            break
        if kind == 2 and length == 4:
            found["tcp.options.mss_val"] = (i + 2, 2)
        elif kind == 3 and length == 3:
            found["tcp.options.wscale.shift"] = (i + 2, 1)
        elif kind == 8 and length == 10:
            found["tcp.options.timestamp.tsval"] = (i + 2, 4)
            found["tcp.options.timestamp.tsecr"] = (i + 6, 4)
        i += length
    return found


def find_sni(payload: bytes) -> tuple[int, int] | None:
    """Locate the server_name hostname bytes of a TLS ClientHello at payload start."""
    p = payload
    if len(p) < 9 or p[0] != 0x16 or p[5] != 0x01:
        return None
    try:
        i = 9 + 2 + 32  # handshake header, client_version, random
        i += 1 + p[i]  # session id
        i += 2 + struct.unpack_from("!H", p, i)[0]  # cipher suites
        i += 1 + p[i]  # compression methods
        ext_end = i + 2 + struct.unpack_from("!H", p, i)[0]
        i += 2
        ext_end = min(ext_end, len(p))
        while i + 4 <= ext_end:
            ext_type, ext_len = struct.unpack_from("!HH", p, i)
            body = i + 4
            if ext_type == 0x0000:
                # server_name_list length (2), name_type (1), host_name length (2)
                if p[body + 2] != 0:
                    return None
                name_len = struct.unpack_from("!H", p, body + 3)[0]
                start = body + 5
                if start + name_len > len(p):
                    return None
                return start, name_len
            i = body + ext_len
    except (IndexError, struct.error):
        return None
    return None


def _hex(value: int, width: int) -> str:
    return f"0x{value:0{width}x}"


def record_fields(pkt: ParsedPacket, frame_len: int) -> dict[str, str]:
    """Render parsed values the way tshark prints them (dotted IPs, hex flags/checksums)."""
    v = pkt.parsed_values
    f: dict[str, str] = {
        "frame.len": str(frame_len),
        "frame.cap_len": str(frame_len),
    }
    if pkt.eth_src is not None:
        f["eth.src"] = pkt.eth_src
        f["eth.dst"] = pkt.eth_dst or ""
        f["eth.type"] = "0x0800"
    f["ip.version"] = "4"
    f["ip.hdr_len"] = str(pkt.ip_header_len)
    f["ip.dsfield"] = _hex(v["ip.dsfield"], 2)
    f["ip.len"] = str(v["ip.len"])
    f["ip.id"] = _hex(v["ip.id"], 4)
    f["ip.ttl"] = str(v["ip.ttl"])
    f["ip.proto"] = str(v["ip.proto"])
    f["ip.checksum"] = _hex(v["ip.checksum"], 4)
    f["ip.src"] = int_to_ip(v["ip.src"])
    f["ip.dst"] = int_to_ip(v["ip.dst"])
    if pkt.transport == "TCP":
        for name in ("tcp.srcport", "tcp.dstport", "tcp.seq_raw", "tcp.ack_raw",
                     "tcp.window_size", "tcp.urgent_pointer"):
            f[name] = str(v[name])
        f["tcp.hdr_len"] = str(pkt.transport_header_len)
        f["tcp.len"] = str(pkt.payload_length)
        f["tcp.flags"] = _hex(v["tcp.flags"], 4)
        f["tcp.checksum"] = _hex(v["tcp.checksum"], 4)
        for name in ("tcp.options.mss_val", "tcp.options.wscale.shift",
                     "tcp.options.timestamp.tsval", "tcp.options.timestamp.tsecr"):
            if name in v:
                f[name] = str(v[name])
        if pkt.sni is not None:
            f[SNI_FIELD] = pkt.sni
    elif pkt.transport == "UDP":
        for name in ("udp.srcport", "udp.dstport", "udp.length"):
            f[name] = str(v[name])
        f["udp.checksum"] = _hex(v["udp.checksum"], 4)
    return f

"""Fixed-size session byte tensors and field occlusion at parsed offsets.

A tensor holds the first five packets of a session, each as 80 header bytes
(starting at the IP header) followed by 240 payload bytes.  Occlusion edits
only the bytes of the targeted fields, then repairs any checksum whose
coverage changed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checksum import ipv4_header_checksum, transport_checksum
from .errors import OcclusionError
from .ingest.capture import write_pcap
from .ingest.packets import KNOWN_FIELDS, SNI_FIELD
from .ingest.sessions import Session

log = logging.getLogger(__name__)

N_PACKETS = 5
HEADER_BYTES = 80
PAYLOAD_BYTES = 240
ROW_BYTES = HEADER_BYTES + PAYLOAD_BYTES

ZERO, RELATIVE, RANDOM = "zero", "relative", "random"
STRATEGIES = (ZERO, RELATIVE, RANDOM)

TARGET_GROUPS: dict[str, tuple[str, ...]] = {
    "SII": ("ip.src", "ip.dst", "tcp.srcport", "tcp.dstport", "udp.srcport", "udp.dstport"),
    "SNI": (SNI_FIELD,),
    "TCP_TIMESTAMP": ("tcp.options.timestamp.tsval", "tcp.options.timestamp.tsecr"),
    "SEQ_ACK": ("tcp.seq_raw", "tcp.ack_raw"),
    "IP_TTL": ("ip.ttl",),
    "TCP_WINDOW": ("tcp.window_size",),
    "IP_CHECKSUM": ("ip.checksum",),
    "L4_CHECKSUM": ("tcp.checksum", "udp.checksum"),
}
IP_ADDRESS_FIELDS = frozenset({"ip.src", "ip.dst"})
PORT_FIELDS = frozenset({"tcp.srcport", "tcp.dstport", "udp.srcport", "udp.dstport"})
SHIFT_FIELDS = frozenset({"tcp.seq_raw", "tcp.ack_raw",
                          "tcp.options.timestamp.tsval", "tcp.options.timestamp.tsecr"})
TRANSPORT_CHECKSUMS = {"TCP": ("tcp.checksum", 6, 16), "UDP": ("udp.checksum", 17, 6)}

FLAG_L4_ZEROED = "transport_checksum_zeroed"
FLAG_TRUNCATED = "payload_truncated"


def resolve_targets(targets: Iterable[str]) -> list[str]:
    """Expand group aliases; unknown names raise ``OcclusionError``."""
    out: list[str] = []
    for t in targets:
        names = TARGET_GROUPS.get(t.upper(), (t,))
        for n in names:
            if n not in KNOWN_FIELDS:
                raise OcclusionError(f"unknown occlusion target {t!r}")
            if n not in out:
                out.append(n)
    return out


@dataclass
class RowInfo:
    """What is needed to re-derive checksums for one tensor row."""

    transport: str | None
    ip_header_len: int
    transport_header_len: int
    ip_total_length: int
    payload_stored: int
    payload_captured: int
    direction: str
    timestamp: float


@dataclass
class SessionTensor:
    data: np.ndarray
    offset_map: list[dict[str, tuple[int, int, int]]]
    label: str
    session_id: str
    rows: list[RowInfo | None]
    flags: list[set[str]] = field(default_factory=lambda: [set() for _ in range(N_PACKETS)])
    warnings: list[str] = field(default_factory=list)

    @property
    def n_packets(self) -> int:
        return sum(r is not None for r in self.rows)

    def copy(self) -> "SessionTensor":
        return replace(
            self,
            data=self.data.copy(),
            offset_map=[dict(m) for m in self.offset_map],
            rows=list(self.rows),
            flags=[set(f) for f in self.flags],
            warnings=list(self.warnings),
        )

    def field_bytes(self, row: int, name: str) -> bytes:
        _, start, length = self.offset_map[row][name]
        return self.data[row, start:start + length].tobytes()


def build_session_tensor(session: Session) -> SessionTensor:
    """First five parsed packets of a session, both directions interleaved in time order."""
    packets = [sp for sp in session.packets if sp.parsed is not None][:N_PACKETS]
    if not packets:
        raise OcclusionError(f"session {session.session_id} has no parsed packets")
    data = np.zeros((N_PACKETS, ROW_BYTES), dtype=np.uint8)
    offsets: list[dict[str, tuple[int, int, int]]] = [{} for _ in range(N_PACKETS)]
    rows: list[RowInfo | None] = [None] * N_PACKETS
    flags: list[set[str]] = [set() for _ in range(N_PACKETS)]
    for r, sp in enumerate(packets):
        pkt = sp.parsed
        head = pkt.header_bytes[:HEADER_BYTES]
        pay = pkt.payload_bytes[:PAYLOAD_BYTES]
        data[r, :len(head)] = np.frombuffer(head, dtype=np.uint8)
        data[r, HEADER_BYTES:HEADER_BYTES + len(pay)] = np.frombuffer(pay, dtype=np.uint8)
        for name, (start, length) in pkt.field_offsets.items():
            if start + length <= HEADER_BYTES:
                offsets[r][name] = (r, start, length)
        for name, (start, length) in pkt.payload_offsets.items():
            if start < PAYLOAD_BYTES:
                offsets[r][name] = (r, HEADER_BYTES + start, min(length, PAYLOAD_BYTES - start))
        rows[r] = RowInfo(
            transport=pkt.transport,
            ip_header_len=pkt.ip_header_len,
            transport_header_len=pkt.transport_header_len,
            ip_total_length=pkt.ip_total_length,
            payload_stored=len(pay),
            payload_captured=len(pkt.payload_bytes),
            direction=sp.direction,
            timestamp=sp.record.timestamp,
        )
        if pkt.payload_truncated:
            flags[r].add(FLAG_TRUNCATED)
    return SessionTensor(data, offsets, session.label, session.session_id, rows, flags)


def build_tensors(sessions: Sequence[Session]) -> list[SessionTensor]:
    out = []
    for s in sessions:
        if any(sp.parsed is not None for sp in s.packets):
            out.append(build_session_tensor(s))
    return out


def _transport_computable(info: RowInfo) -> bool:
    seg_header_end = info.ip_header_len + info.transport_header_len
    payload_len = info.ip_total_length - seg_header_end
    return (
        info.transport in TRANSPORT_CHECKSUMS
        and seg_header_end <= HEADER_BYTES
        and 0 <= payload_len <= PAYLOAD_BYTES
        and info.payload_stored >= payload_len
    )


def recompute_checksums(
    row: np.ndarray, info: RowInfo, ip: bool = True, transport: bool = True
) -> tuple[np.ndarray, set[str]]:
    """Recompute the IPv4 header and TCP/UDP checksums of one tensor row.

    When the transport checksum cannot be derived from the stored bytes (header
    past the 80-byte budget, or payload cut by capture or the 240-byte cap) it
    is zeroed and flagged instead.
    """
    out = np.array(row, dtype=np.uint8, copy=True)
    flags: set[str] = set()
    ihl = info.ip_header_len
    if ip and ihl <= HEADER_BYTES:
        out[10:12] = np.frombuffer(struct.pack("!H", ipv4_header_checksum(out[:ihl].tobytes())), dtype=np.uint8)
    if transport and info.transport in TRANSPORT_CHECKSUMS:
        _, proto, off = TRANSPORT_CHECKSUMS[info.transport]
        pos = ihl + off
        if pos + 2 > HEADER_BYTES:
            return out, flags
        if _transport_computable(info):
            end = ihl + info.transport_header_len
            payload_len = info.ip_total_length - end
            segment = out[ihl:end].tobytes() + out[HEADER_BYTES:HEADER_BYTES + payload_len].tobytes()
            value = transport_checksum(out[12:16].tobytes(), out[16:20].tobytes(), proto, segment, off)
            out[pos:pos + 2] = np.frombuffer(struct.pack("!H", value), dtype=np.uint8)
        else:
            out[pos:pos + 2] = 0
            flags.add(FLAG_L4_ZEROED)
    return out, flags


@dataclass(frozen=True)
class OcclusionSpec:
    strategy: str
    targets: tuple[str, ...]
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise OcclusionError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.targets:
            raise OcclusionError("occlusion needs at least one target")
        object.__setattr__(self, "targets", tuple(self.targets))
        fields = resolve_targets(self.targets)
        if self.strategy == RELATIVE and SNI_FIELD in fields:
            raise OcclusionError("relative strategy applies to numeric header fields, not the SNI hostname")

    @property
    def fields(self) -> list[str]:
        return resolve_targets(self.targets)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "targets": list(self.targets), "seed": self.seed}


def session_rng(seed: int, session_id: str) -> np.random.Generator:
    digest = hashlib.sha256(session_id.encode("utf-8")).digest()
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest[:8], "big")])


def _read(data: np.ndarray, loc: tuple[int, int, int]) -> int:
    r, s, n = loc
    return int.from_bytes(data[r, s:s + n].tobytes(), "big")


def _write(data: np.ndarray, loc: tuple[int, int, int], value: int) -> None:
    r, s, n = loc
    data[r, s:s + n] = np.frombuffer((value % (1 << (8 * n))).to_bytes(n, "big"), dtype=np.uint8)


def _injective_map(values: list[int], bits: int, rng: np.random.Generator) -> dict[int, int]:
    mapping: dict[int, int] = {}
    used: set[int] = set()
    for v in values:
        while True:
            sub = int(rng.integers(0, 1 << bits, dtype=np.uint64))
            if sub not in used:
                break
        used.add(sub)
        mapping[v] = sub
    return mapping


def apply_occlusion(tensor: SessionTensor, spec: OcclusionSpec) -> SessionTensor:
    """Return a copy of ``tensor`` with the targeted fields occluded."""
    out = tensor.copy()
    before = tensor.data
    data = out.data
    fields = spec.fields
    present = {f: [m[f] for m in tensor.offset_map if f in m] for f in fields}
    for f in fields:
        if not present[f]:
            msg = f"{tensor.session_id}: target {f} absent from all packets; left unchanged"
            log.debug(msg)
            out.warnings.append(msg)
    active = [f for f in fields if present[f]]

    if spec.strategy == ZERO:
        for f in active:
            for r, s, n in present[f]:
                data[r, s:s + n] = 0
    elif spec.strategy == RELATIVE:
        for f in active:
            last: dict[str, int] = {}
            for loc in present[f]:
                direction = tensor.rows[loc[0]].direction
                v = _read(before, loc)
                prev = last.get(direction)
                _write(data, loc, 0 if prev is None else v - prev)
                last[direction] = v
    else:
        rng = session_rng(spec.seed, tensor.session_id)
        ip_targets = sorted(f for f in active if f in IP_ADDRESS_FIELDS)
        port_targets = sorted(f for f in active if f in PORT_FIELDS)
        if ip_targets:
            originals = sorted({_read(before, loc) for f in ip_targets for loc in present[f]})
            ip_map = _injective_map(originals, 32, rng)
            for f in ip_targets:
                for loc in present[f]:
                    _write(data, loc, ip_map[_read(before, loc)])
        if port_targets:
            originals = sorted({_read(before, loc) for f in port_targets for loc in present[f]})
            port_map = _injective_map(originals, 16, rng)
            for f in port_targets:
                for loc in present[f]:
                    _write(data, loc, port_map[_read(before, loc)])
        for f in sorted(f for f in active if f in SHIFT_FIELDS):
            # random base for the first occurrence; later values keep their offsets from it
            width = present[f][0][2]
            base = int(rng.integers(0, 1 << (8 * width), dtype=np.uint64))
            first = _read(before, present[f][0])
            for loc in present[f]:
                _write(data, loc, base + _read(before, loc) - first)
        for f in sorted(f for f in active if f not in IP_ADDRESS_FIELDS | PORT_FIELDS | SHIFT_FIELDS):
            for r, s, n in present[f]:
                data[r, s:s + n] = rng.integers(0, 256, n, dtype=np.uint8)

    _repair_checksums(out, before, set(active))
    return out


def _repair_checksums(out: SessionTensor, before: np.ndarray, targeted: set[str]) -> None:
    for r, info in enumerate(out.rows):
        if info is None:
            continue
        changed = np.flatnonzero(out.data[r] != before[r])
        if changed.size == 0:
            continue
        ihl = info.ip_header_len
        ip_cover = bool(np.any((changed < ihl) & ((changed < 10) | (changed > 11))))
        redo_ip = ip_cover and "ip.checksum" not in targeted
        redo_l4 = False
        if info.transport in TRANSPORT_CHECKSUMS:
            name, _, off = TRANSPORT_CHECKSUMS[info.transport]
            pos = ihl + off
            in_pseudo = (changed >= 12) & (changed < 20)
            in_segment = (changed >= ihl) & ((changed < pos) | (changed > pos + 1))
            redo_l4 = bool(np.any(in_pseudo | in_segment)) and name not in targeted
        if redo_ip or redo_l4:
            row, flags = recompute_checksums(out.data[r], info, ip=redo_ip, transport=redo_l4)
            out.data[r] = row
            out.flags[r] |= flags


def occlude_all(tensors: Sequence[SessionTensor], spec: OcclusionSpec, workers: int = 1) -> list[SessionTensor]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda t: apply_occlusion(t, spec), tensors))
    return [apply_occlusion(t, spec) for t in tensors]


MAGIC = b"SATN"
VERSION = 1


def write_tensors(path: str | Path, tensors: Sequence[SessionTensor], class_names: Sequence[str] | None = None,
                  extra: dict | None = None) -> tuple[Path, Path]:
    """Binary container (magic, version, shape, N, rows, label codes) plus a JSON index."""
    path = Path(path)
    names = list(class_names) if class_names is not None else sorted({t.label for t in tensors})
    code = {c: i for i, c in enumerate(names)}
    header = MAGIC + struct.pack("<HHHI", VERSION, N_PACKETS, ROW_BYTES, len(tensors))
    body = b"".join(t.data.tobytes() for t in tensors)
    labels = np.array([code[t.label] for t in tensors], dtype="<u4").tobytes()
    blob = header + body + labels
    path.write_bytes(blob)
    index = {
        **(extra or {}),
        "format": {"magic": MAGIC.decode(), "version": VERSION, "packets": N_PACKETS,
                   "header_bytes": HEADER_BYTES, "payload_bytes": PAYLOAD_BYTES},
        "count": len(tensors),
        "class_names": names,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "sessions": [
            {"session_id": t.session_id, "label": t.label, "packets": t.n_packets,
             "flags": sorted({f for fl in t.flags for f in fl})}
            for t in tensors
        ],
    }
    ipath = path.with_suffix(path.suffix + ".json")
    ipath.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return path, ipath


def read_tensors(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Inverse of ``write_tensors``: (N×5×320 uint8, label codes, index)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise OcclusionError(f"{path}: not a tensor container")
    version, rows, cols, n = struct.unpack_from("<HHHI", blob, 4)
    if version != VERSION:
        raise OcclusionError(f"{path}: unsupported container version {version}")
    off = 4 + struct.calcsize("<HHHI")
    size = n * rows * cols
    data = np.frombuffer(blob, dtype=np.uint8, count=size, offset=off).reshape(n, rows, cols)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off + size).astype(np.int64)
    index_path = path.with_suffix(path.suffix + ".json")
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    return data, labels, index


def tensor_packets(tensor: SessionTensor) -> list[tuple[int, bytes]]:
    """Rebuild raw IP packets from the stored bytes (for re-emitting as pcap)."""
    frames = []
    for r, info in enumerate(tensor.rows):
        if info is None:
            continue
        head = tensor.data[r, :min(info.ip_header_len + info.transport_header_len, HEADER_BYTES)].tobytes()
        pay = tensor.data[r, HEADER_BYTES:HEADER_BYTES + info.payload_stored].tobytes()
        frames.append((int(round(info.timestamp * 1e6)), head + pay))
    return frames


def write_occluded_pcap(path: str | Path, tensors: Sequence[SessionTensor]) -> int:
    frames = sorted((f for t in tensors for f in tensor_packets(t)), key=lambda x: x[0])
    write_pcap(path, frames, link_type=101)
    return len(frames)


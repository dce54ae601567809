"""Bidirectional session assembly and labeling."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ..errors import RecordFormatError
from .packets import FORWARD, REVERSE, FlowKey, PacketRecord, ParsedPacket


@dataclass(slots=True)
class SessionPacket:
    record: PacketRecord
    parsed: ParsedPacket | None
    direction: str


@dataclass
class Session:
    flow_key: FlowKey
    packets: list[SessionPacket]
    label: str
    dataset_tag: str
    source: str = ""

    @property
    def session_id(self) -> str:
        return f"{self.source}|{self.flow_key}"


@dataclass
class LabelRule:
    """One class per capture source, optionally overridden per flow.

    ``flow_labels`` is keyed by canonical flow key and applies to every source.
    """

    by_source: dict[str, str] = field(default_factory=dict)
    tag_by_source: dict[str, str] = field(default_factory=dict)
    flow_labels: dict[FlowKey, str] = field(default_factory=dict)
    default_tag: str = "default"

    def label_for(self, source: str, key: FlowKey) -> str | None:
        if key in self.flow_labels:
            return self.flow_labels[key]
        return self.by_source.get(source)

    def tag_for(self, source: str) -> str:
        return self.tag_by_source.get(source, self.default_tag)

    @staticmethod
    def read_flow_labels(path: str | Path) -> dict[FlowKey, str]:
        """CSV columns: src_ip,src_port,dst_ip,dst_port,transport,label (orientation free)."""
        out: dict[FlowKey, str] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"src_ip", "src_port", "dst_ip", "dst_port", "transport", "label"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise RecordFormatError(f"{path}: flow label file needs columns {sorted(need)}")
            for row in reader:
                key = FlowKey.from_endpoints(
                    (row["src_ip"], int(row["src_port"])),
                    (row["dst_ip"], int(row["dst_port"])),
                    row["transport"].upper(),
                )
                out[key] = row["label"]
        return out


@dataclass
class AssemblyResult:
    sessions: list[Session]
    unlabeled_flows: int = 0
    unkeyed_packets: int = 0

    def __iter__(self):
        return iter(self.sessions)

    def __len__(self) -> int:
        return len(self.sessions)


def assemble_sessions(
    packets: Iterable[tuple[PacketRecord, ParsedPacket | None]], labels: LabelRule
) -> AssemblyResult:
    """Group packets into sessions by (source, canonical flow key).

    Packets are time ordered (ties by capture index); the orientation of the
    earliest packet defines the forward direction.
    """
    groups: dict[tuple[str, FlowKey], list[tuple[PacketRecord, ParsedPacket | None]]] = defaultdict(list)
    unkeyed = 0
    for rec, parsed in packets:
        if rec.flow_key is None:
            unkeyed += 1
            continue
        groups[(rec.source, rec.flow_key)].append((rec, parsed))

    result = AssemblyResult([], unkeyed_packets=unkeyed)
    for (source, key), members in groups.items():
        label = labels.label_for(source, key)
        if label is None:
            result.unlabeled_flows += 1
            continue
        members.sort(key=lambda m: (m[0].timestamp, m[0].capture_index))
        first_orientation = members[0][0].direction
        pkts = [
            SessionPacket(rec, parsed, FORWARD if rec.direction == first_orientation else REVERSE)
            for rec, parsed in members
        ]
        result.sessions.append(Session(key, pkts, label, labels.tag_for(source), source))
    result.sessions.sort(key=lambda s: (s.source, s.packets[0].record.timestamp,
                                        s.packets[0].record.capture_index, str(s.flow_key)))
    return result

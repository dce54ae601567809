"""Per-packet field extraction: external dissector, built-in parser, field tables."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from ..errors import DissectFailed, ParseError, RecordFormatError, ToolUnavailable
from .capture import read_capture
from .packets import PacketRecord, ParsedPacket, flow_key_from_fields, parse_packet_inline, record_fields

log = logging.getLogger(__name__)

# always requested in field-list mode so records can be keyed into flows
IDENTITY_FIELDS = (
    "frame.number", "frame.time_epoch", "ip.src", "ip.dst",
    "tcp.srcport", "tcp.dstport", "udp.srcport", "udp.dstport",
)
TIMESTAMP_COLUMNS = ("frame.time_epoch", "timestamp")
_FIELD_NAME = re.compile(r"^[A-Za-z0-9_\-]+(\.[A-Za-z0-9_\-]+)+$")


@dataclass
class RecordBatch:
    records: list[PacketRecord]
    warnings: int = 0
    skipped: dict[str, int] = field(default_factory=dict)
    parsed: list[ParsedPacket] | None = None

    def __iter__(self) -> Iterator[PacketRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


def make_record(index: int, timestamp: float, fields: dict[str, str], source: str) -> PacketRecord:
    keyed = flow_key_from_fields(fields)
    if keyed is None:
        return PacketRecord(index, timestamp, fields, None, source=source)
    key, direction = keyed
    return PacketRecord(index, timestamp, fields, key, direction, source)


def resolve_dissector(binary: str = "tshark") -> str | None:
    return shutil.which(binary)


def run_external_dissector(
    capture_path: str | Path,
    field_list: Sequence[str],
    dissector_binary: str = "tshark",
    extra_args: Sequence[str] = (),
    source: str | None = None,
) -> RecordBatch:
    """Run a tshark-compatible dissector over one capture.

    With a non-empty ``field_list`` the tab-separated field export is used;
    an empty list selects the JSON export and keeps every leaf field.
    """
    capture_path = Path(capture_path)
    if not capture_path.is_file():
        raise ToolUnavailable(f"capture not found: {capture_path}")
    if field_list:
        wanted = list(dict.fromkeys(list(IDENTITY_FIELDS) + list(field_list)))
        cmd = [dissector_binary, "-r", str(capture_path), "-T", "fields",
               "-E", "header=y", "-E", "separator=/t", "-E", "occurrence=f"]
        for name in wanted:
            cmd += ["-e", name]
    else:
        cmd = [dissector_binary, "-r", str(capture_path), "-T", "json"]
    cmd += list(extra_args)
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, check=False)
    except (FileNotFoundError, PermissionError, OSError) as exc:
        raise ToolUnavailable(f"cannot launch dissector {dissector_binary!r}: {exc}") from exc
    if proc.returncode != 0:
        raise DissectFailed(f"dissector exited with status {proc.returncode}", proc.stderr)
    src = source if source is not None else str(capture_path)
    if field_list:
        return _parse_tsv(proc.stdout, src)
    return _parse_json(proc.stdout, src)


def _parse_tsv(text: str, source: str) -> RecordBatch:
    lines = text.splitlines()
    batch = RecordBatch([])
    if not lines:
        return batch
    header = lines[0].split("\t")
    for ordinal, line in enumerate(lines[1:], start=1):
        if not line:
            continue
        cells = line.split("\t")
        if len(cells) != len(header):
            batch.warnings += 1
            continue
        fields = {k: v for k, v in zip(header, cells) if v != ""}
        rec = _record_from_flat(fields, ordinal, source)
        if rec is None:
            batch.warnings += 1
            continue
        batch.records.append(rec)
    return batch


def _record_from_flat(fields: dict[str, str], ordinal: int, source: str) -> PacketRecord | None:
    try:
        index = int(fields.get("frame.number", ordinal))
        ts_raw = next((fields[c] for c in TIMESTAMP_COLUMNS if c in fields), None)
        timestamp = float(ts_raw) if ts_raw is not None else 0.0
    except ValueError:
        return None
    if not math.isfinite(timestamp) or timestamp < 0:
        return None
    fields.pop("timestamp", None)
    return make_record(index, timestamp, fields, source)


def flatten_layers(layers: dict) -> dict[str, str]:
    """Collapse a tshark JSON layer tree into ``{dotted.name: value}`` (first occurrence wins)."""
    out: dict[str, str] = {}

    def walk(node) -> None:
        for key, value in node.items():
            if isinstance(value, dict):
                walk(value)
            elif isinstance(value, list):
                if value and isinstance(value[0], str):
                    if _FIELD_NAME.match(key) and key not in out:
                        out[key] = value[0]
                elif value and isinstance(value[0], dict):
                    walk(value[0])
            elif isinstance(value, str) and _FIELD_NAME.match(key) and key not in out:
                out[key] = value

    walk(layers)
    return out


def _parse_json(text: str, source: str) -> RecordBatch:
    batch = RecordBatch([])
    body = text.strip()
    if not body:
        return batch
    decoder = json.JSONDecoder()
    pos = body.find("[")
    if pos < 0:
        batch.warnings += 1
        return batch
    pos += 1
    ordinal = 0
    n = len(body)
    while pos < n:
        while pos < n and body[pos] in " \t\r\n,":
            pos += 1
        if pos >= n or body[pos] == "]":
            break
        try:
            obj, end = decoder.raw_decode(body, pos)
        except json.JSONDecodeError:
            batch.warnings += 1
            nxt = body.find("\n  {", pos + 1)
            if nxt < 0:
                break
            pos = nxt
            continue
        pos = end
        ordinal += 1
        try:
            layers = obj["_source"]["layers"]
        except (KeyError, TypeError):
            batch.warnings += 1
            continue
        rec = _record_from_flat(flatten_layers(layers), ordinal, source)
        if rec is None:
            batch.warnings += 1
            continue
        batch.records.append(rec)
    return batch


def dissect_frames(
    frames: Iterable[tuple[int, float, bytes, int]], source: str = ""
) -> RecordBatch:
    """Built-in dissection: parse each frame inline and render tshark-style records.

    Frames the parser rejects are counted in ``skipped`` by error class.
    """
    batch = RecordBatch([], parsed=[])
    for index, ts, frame, link_type in frames:
        try:
            pkt = parse_packet_inline(frame, link_type)
        except ParseError as exc:
            reason = type(exc).__name__.lower()
            batch.skipped[reason] = batch.skipped.get(reason, 0) + 1
            continue
        fields = {"frame.number": str(index), "frame.time_epoch": f"{ts:.6f}"}
        fields.update(record_fields(pkt, len(frame)))
        batch.records.append(make_record(index, ts, fields, source))
        batch.parsed.append(pkt)
    return batch


def dissect_capture(path: str | Path, source: str | None = None) -> RecordBatch:
    return dissect_frames(read_capture(path), source if source is not None else str(path))


def parse_capture(path: str | Path) -> dict[int, ParsedPacket]:
    """Parse every frame of a capture inline, keyed by capture index (rejects dropped)."""
    out: dict[int, ParsedPacket] = {}
    for index, _ts, frame, link_type in read_capture(path):
        try:
            out[index] = parse_packet_inline(frame, link_type)
        except ParseError:
            continue
    return out


def load_records(path: str | Path, fmt: str | None = None, source: str | None = None) -> RecordBatch:
    """Read a pre-extracted field table (NDJSON or CSV with header).

    Empty cells and JSON nulls are treated as absent fields.  Malformed rows are
    skipped with a warning; a file without any timestamp or flow columns is an error.
    """
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "ndjson"
    fmt = fmt.lower()
    src = source if source is not None else str(path)
    rows: list[dict[str, str] | None] = []
    if fmt == "csv":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise RecordFormatError(f"{path}: CSV file has no header row") from None
            _require_columns(set(header), path)
            for cells in reader:
                if len(cells) != len(header):
                    rows.append(None)
                    continue
                rows.append({k: v for k, v in zip(header, cells) if v != ""})
    elif fmt == "ndjson":
        seen: set[str] = set()
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    rows.append(None)
                    continue
                if not isinstance(obj, dict):
                    rows.append(None)
                    continue
                row = {str(k): _stringify(v) for k, v in obj.items() if v is not None and v != ""}
                seen.update(row)
                rows.append(row)
        if rows and any(r is not None for r in rows):
            _require_columns(seen, path)
    else:
        raise RecordFormatError(f"unknown record format {fmt!r}")

    batch = RecordBatch([])
    for ordinal, row in enumerate(rows, start=1):
        if row is None:
            batch.warnings += 1
            continue
        row_source = row.pop("_source", src)
        rec = _record_from_flat(row, ordinal, row_source)
        if rec is None:
            batch.warnings += 1
            continue
        batch.records.append(rec)
    if batch.warnings:
        log.warning("%s: skipped %d malformed rows", path, batch.warnings)
    return batch


def _stringify(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _require_columns(columns: set[str], path: Path) -> None:
    missing = []
    if not any(c in columns for c in TIMESTAMP_COLUMNS):
        missing.append("frame.time_epoch")
    for c in ("ip.src", "ip.dst"):
        if c not in columns:
            missing.append(c)
    if not ({"tcp.srcport", "tcp.dstport"} <= columns or {"udp.srcport", "udp.dstport"} <= columns):
        missing.append("tcp/udp ports")
    if missing:
        raise RecordFormatError(f"{path}: missing mandatory columns: {', '.join(missing)}")


def dump_records(records: Iterable[PacketRecord], path: str | Path) -> int:
    """Cache records as NDJSON readable by ``load_records``."""
    count = 0
    with open(path, "w") as fh:
        for rec in records:
            row = {"frame.number": str(rec.capture_index), "frame.time_epoch": f"{rec.timestamp:.6f}"}
            row.update(rec.fields)
            row["_source"] = rec.source
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            count += 1
    return count

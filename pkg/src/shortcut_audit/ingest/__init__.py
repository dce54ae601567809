from .capture import PcapWriter, read_capture, write_pcap
from .dissect import (
    RecordBatch,
    dissect_capture,
    dissect_frames,
    dump_records,
    load_records,
    parse_capture,
    resolve_dissector,
    run_external_dissector,
)
from .packets import (
    FORWARD,
    KNOWN_FIELDS,
    REVERSE,
    SNI_FIELD,
    FlowKey,
    LinkType,
    PacketRecord,
    ParsedPacket,
    parse_packet_inline,
)
from .sessions import AssemblyResult, LabelRule, Session, SessionPacket, assemble_sessions

__all__ = [
    "FORWARD", "REVERSE", "KNOWN_FIELDS", "SNI_FIELD",
    "AssemblyResult", "FlowKey", "LabelRule", "LinkType", "PacketRecord", "ParsedPacket",
    "PcapWriter", "RecordBatch", "Session", "SessionPacket",
    "assemble_sessions", "dissect_capture", "dissect_frames", "dump_records", "load_records",
    "parse_capture", "parse_packet_inline", "read_capture", "resolve_dissector",
    "run_external_dissector", "write_pcap",
]

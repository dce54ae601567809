from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from shortcut_audit.checksum import internet_checksum
from shortcut_audit.errors import DissectFailed, RecordFormatError, ToolUnavailable, Truncated, Unsupported
from shortcut_audit.ingest import (
    FORWARD,
    REVERSE,
    FlowKey,
    LabelRule,
    assemble_sessions,
    dissect_capture,
    dissect_frames,
    dump_records,
    load_records,
    parse_packet_inline,
    read_capture,
    run_external_dissector,
    write_pcap,
)
from shortcut_audit.ingest.packets import find_sni
from shortcut_audit.synthgen import SynthSpec, build_tcp_frame, client_hello, write_synthetic_dataset


def frame(seq=1000, payload=b"", src="10.0.0.1", dst="10.0.0.2", sport=1234, dport=80, options=b""):
    return build_tcp_frame(src, dst, sport, dport, seq, 7, 0x18, 4096, options, payload, 5, 64)


def test_parse_tcp_fields_and_offsets():
    pkt = parse_packet_inline(frame(seq=0xDEADBEEF, payload=b"hello"), 1)
    v = pkt.parsed_values
    assert v["tcp.seq_raw"] == 0xDEADBEEF and v["tcp.ack_raw"] == 7 and v["tcp.window_size"] == 4096
    assert v["ip.ttl"] == 64 and v["ip.len"] == 45
    start, n = pkt.field_offsets["tcp.seq_raw"]
    assert pkt.header_bytes[start:start + n] == struct.pack("!I", 0xDEADBEEF)
    assert pkt.payload_bytes == b"hello" and pkt.payload_length == 5
    assert internet_checksum(pkt.header_bytes[:20]) == 0
    assert pkt.eth_src == "02:00:00:00:00:01"


def test_parse_tcp_timestamp_option():
    opts = b"\x01\x01" + struct.pack("!BBII", 8, 10, 111, 222)
    pkt = parse_packet_inline(frame(options=opts), 1)
    assert pkt.parsed_values["tcp.options.timestamp.tsval"] == 111
    assert pkt.parsed_values["tcp.options.timestamp.tsecr"] == 222
    assert pkt.transport_header_len == 32


def test_parse_vlan_and_raw_ip():
    f = frame(payload=b"x")
    vlan = f[:12] + b"\x81\x00\x00\x05" + f[12:]
    assert parse_packet_inline(vlan, 1).parsed_values["ip.src"] == parse_packet_inline(f, 1).parsed_values["ip.src"]
    raw = parse_packet_inline(f[14:], 101)
    assert raw.eth_src is None and raw.payload_bytes == b"x"


def test_parse_errors():
    f = frame()
    with pytest.raises(Truncated):
        parse_packet_inline(f[:20], 1)
    with pytest.raises(Truncated):
        parse_packet_inline(f[:14 + 30], 1)
    with pytest.raises(Unsupported):
        parse_packet_inline(f[:12] + b"\x86\xdd" + f[14:], 1)
    with pytest.raises(Unsupported):
        parse_packet_inline(f, 228)
    ipv6 = bytearray(f)
    ipv6[14] = 0x60
    with pytest.raises(Unsupported):
        parse_packet_inline(bytes(ipv6), 1)


def test_sni_located():
    hello = client_hello("shop.example.org", np.random.default_rng(0))
    pkt = parse_packet_inline(frame(payload=hello, dport=443), 1)
    assert pkt.sni == "shop.example.org"
    start, n = pkt.payload_offsets["tls.handshake.extensions_server_name"]
    assert hello[start:start + n] == b"shop.example.org"
    assert find_sni(b"\x17\x03\x03" + b"\x00" * 40) is None


def test_pcap_roundtrip(tmp_path):
    frames = [(1_600_000_000_000_000 + i * 1500, frame(seq=i)) for i in range(5)]
    assert write_pcap(tmp_path / "a.pcap", frames) == 5
    back = list(read_capture(tmp_path / "a.pcap"))
    assert [b[0] for b in back] == [1, 2, 3, 4, 5]
    assert [b[2] for b in back] == [f for _, f in frames]
    assert back[1][1] == pytest.approx(1_600_000_000.0015, abs=1e-6)
    with pytest.raises(ToolUnavailable):
        list(read_capture(tmp_path / "missing.pcap"))
    (tmp_path / "junk.pcap").write_bytes(b"not a capture at all")
    with pytest.raises(ToolUnavailable):
        list(read_capture(tmp_path / "junk.pcap"))


def test_dissect_frames_counts_rejects():
    batch = dissect_frames([(1, 1.0, frame(), 1), (2, 1.1, b"\x00" * 10, 1), (3, 1.2, frame(), 999)], "s")
    assert len(batch.records) == 1
    assert batch.skipped == {"truncated": 1, "unsupported": 1}
    rec = batch.records[0]
    assert rec.fields["ip.src"] == "10.0.0.1" and rec.fields["tcp.seq_raw"] == "1000"
    assert rec.fields["ip.checksum"].startswith("0x") and rec.source == "s"


@pytest.fixture(scope="module")
def small_capture(tmp_path_factory):
    out = tmp_path_factory.mktemp("cap")
    inputs, _ = write_synthetic_dataset(SynthSpec(2, 4, 0, shortcuts=("sii_bijection",), packets_per_flow=(3, 5)), out)
    return inputs[0]["path"]


def test_external_dissector_fields_matches_builtin(fake_tshark, small_capture):
    builtin = dissect_capture(small_capture)
    names = ["ip.ttl", "tcp.seq_raw", "tcp.window_size", "frame.time_epoch", "ip.src", "ip.dst",
             "tcp.srcport", "tcp.dstport"]
    ext = run_external_dissector(small_capture, names, fake_tshark)
    assert len(ext.records) == len(builtin.records)
    for a, b in zip(ext.records, builtin.records):
        assert a.capture_index == b.capture_index and a.flow_key == b.flow_key
        for n in names:
            assert a.fields.get(n) == b.fields.get(n)


def test_external_dissector_json_keeps_all_fields(fake_tshark, small_capture):
    builtin = dissect_capture(small_capture)
    ext = run_external_dissector(small_capture, [], fake_tshark)
    assert [r.fields for r in ext.records] == [r.fields for r in builtin.records]


def test_external_dissector_errors(fake_tshark, tmp_path, small_capture):
    with pytest.raises(ToolUnavailable):
        run_external_dissector(small_capture, ["ip.src"], str(tmp_path / "no-such-binary"))
    with pytest.raises(ToolUnavailable):
        run_external_dissector(tmp_path / "missing.pcap", ["ip.src"], fake_tshark)
    (tmp_path / "bad.pcap").write_bytes(b"garbage")
    with pytest.raises(DissectFailed):
        run_external_dissector(tmp_path / "bad.pcap", ["ip.src"], fake_tshark)


def test_record_files_roundtrip_and_malformed(tmp_path, small_capture):
    batch = dissect_capture(small_capture, "src")
    n = dump_records(batch.records, tmp_path / "r.ndjson")
    back = load_records(tmp_path / "r.ndjson")
    assert n == len(back.records)
    assert [r.fields for r in back.records] == [r.fields for r in batch.records]
    assert back.records[0].source == "src"
    with open(tmp_path / "r.ndjson", "a") as fh:
        fh.write("{broken\n")
        fh.write(json.dumps([1, 2]) + "\n")
    assert load_records(tmp_path / "r.ndjson").warnings == 2
    (tmp_path / "r.csv").write_text("frame.time_epoch,ip.src,ip.dst,udp.srcport,udp.dstport\n"
                                   "1.0,10.0.0.1,10.0.0.2,53,5000\n2.0,10.0.0.2\n")
    csv_batch = load_records(tmp_path / "r.csv")
    assert len(csv_batch.records) == 1 and csv_batch.warnings == 1
    assert csv_batch.records[0].flow_key.transport == "UDP"
    (tmp_path / "bad.csv").write_text("ip.src,ip.dst\n1.1.1.1,2.2.2.2\n")
    with pytest.raises(RecordFormatError):
        load_records(tmp_path / "bad.csv")


def test_session_assembly_bidirectional():
    frames = [
        (1, 1.0, frame(seq=1), 1),
        (2, 1.1, frame(seq=9, src="10.0.0.2", dst="10.0.0.1", sport=80, dport=1234), 1),
        (3, 1.2, frame(seq=2), 1),
        (4, 0.5, frame(seq=3, sport=4444), 1),
        (5, 2.0, frame(seq=4, src="10.9.9.9"), 1),
    ]
    batch = dissect_frames(frames, "cap")
    other = FlowKey.from_endpoints(("10.9.9.9", 1234), ("10.0.0.2", 80), "TCP")
    rule = LabelRule(by_source={"cap": "web"}, tag_by_source={"cap": "lab"}, flow_labels={other: "odd"})
    res = assemble_sessions(zip(batch.records, batch.parsed), rule)
    assert len(res) == 3 and res.unlabeled_flows == 0
    main = next(s for s in res if len(s.packets) == 3)
    assert [sp.direction for sp in main.packets] == [FORWARD, REVERSE, FORWARD]
    assert main.label == "web" and main.dataset_tag == "lab"
    assert {s.label for s in res} == {"web", "odd"}
    # sessions are ordered by first-packet time within a source
    assert res.sessions[0].packets[0].record.capture_index == 4


def test_unlabeled_flows_counted():
    batch = dissect_frames([(1, 1.0, frame(), 1)], "x")
    res = assemble_sessions(zip(batch.records, batch.parsed), LabelRule())
    assert len(res) == 0 and res.unlabeled_flows == 1


def test_flow_label_file(tmp_path):
    (tmp_path / "labels.csv").write_text("src_ip,src_port,dst_ip,dst_port,transport,label\n"
                                         "10.0.0.2,80,10.0.0.1,1234,tcp,web\n")
    labels = LabelRule.read_flow_labels(tmp_path / "labels.csv")
    assert labels == {FlowKey.from_endpoints(("10.0.0.1", 1234), ("10.0.0.2", 80), "TCP"): "web"}
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(RecordFormatError):
        LabelRule.read_flow_labels(tmp_path / "bad.csv")

from __future__ import annotations

import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import rfc1071_checksum
from shortcut_audit.checksum import internet_checksum, ipv4_header_checksum, transport_checksum
from shortcut_audit.errors import OcclusionError
from shortcut_audit.ingest import LabelRule, assemble_sessions, dissect_capture, dissect_frames
from shortcut_audit.occlusion import (
    FLAG_L4_ZEROED,
    HEADER_BYTES,
    OcclusionSpec,
    apply_occlusion,
    build_session_tensor,
    build_tensors,
    read_tensors,
    recompute_checksums,
    resolve_targets,
    write_occluded_pcap,
    write_tensors,
)
from shortcut_audit.synthgen import SynthSpec, assemble_synthetic, build_tcp_frame, generate_synthetic_dataset

RFC_HEADER = bytes.fromhex("450000730000400040110000c0a80001c0a800c7")


def make_session(frames, label="A"):
    batch = dissect_frames([(i + 1, ts, fr, 1) for i, (ts, fr) in enumerate(frames)], "cap")
    res = assemble_sessions(zip(batch.records, batch.parsed), LabelRule(by_source={"cap": label}))
    assert len(res.sessions) == 1
    return res.sessions[0]


def tcp(seq, payload=b"", src="10.0.0.1", dst="10.0.0.2", sport=1234, dport=80, flags=0x18, options=b""):
    return build_tcp_frame(src, dst, sport, dport, seq, 0, flags, 1000, options, payload, 1, 64)


@pytest.fixture(scope="module")
def synth_tensors():
    spec = SynthSpec(4, 15, 3, shortcuts=("sii_bijection", "sni_leak"), packets_per_flow=(3, 9))
    _, res = assemble_synthetic(generate_synthetic_dataset(spec))
    return build_tensors(res.sessions)


def test_rfc_example_checksum():
    assert ipv4_header_checksum(RFC_HEADER) == 0xB861
    assert rfc1071_checksum(RFC_HEADER) == 0xB861


def test_checksum_matches_oracle_random_headers():
    rng = np.random.default_rng(0)
    for _ in range(300):
        data = rng.integers(0, 256, int(rng.integers(1, 120)), dtype=np.uint8).tobytes()
        assert internet_checksum(data) == rfc1071_checksum(data)


def test_tensor_padding_contract():
    s = make_session([(1.0, tcp(1000, b"x" * 300)), (1.1, tcp(1300, b"y" * 10)), (1.2, tcp(1310))])
    t = build_session_tensor(s)
    assert t.data.shape == (5, 320)
    # 20 B IP + 20 B TCP
    assert t.data[0, 40:80].sum() == 0 and t.data[0, :40].any()
    assert t.data[0, 80:320].tobytes() == b"x" * 240
    assert t.data[1, 80:90].tobytes() == b"y" * 10 and t.data[1, 90:].sum() == 0
    assert not t.data[3:].any()
    assert t.offset_map[3] == {} and t.offset_map[4] == {}
    assert t.n_packets == 3
    for m in t.offset_map[:3]:
        for name, (_, start, length) in m.items():
            assert start + length <= HEADER_BYTES


def test_tensor_uses_first_five_packets_both_directions():
    frames = []
    for i in range(8):
        if i % 2:
            frames.append((1 + i / 10, tcp(5000 + i, src="10.0.0.2", dst="10.0.0.1", sport=80, dport=1234)))
        else:
            frames.append((1 + i / 10, tcp(1000 + i)))
    t = build_session_tensor(make_session(frames))
    seqs = [int.from_bytes(t.field_bytes(r, "tcp.seq_raw"), "big") for r in range(5)]
    assert seqs == [1000, 5001, 1002, 5003, 1004]


def test_zero_ip_src_byte_exact():
    s = make_session([(1.0, tcp(1000, b"abc")), (1.1, tcp(1003, b"de"))])
    t = build_session_tensor(s)
    out = apply_occlusion(t, OcclusionSpec("zero", ("ip.src",)))
    for r in range(2):
        assert out.field_bytes(r, "ip.src") == b"\x00" * 4
    keep = np.ones(320, dtype=bool)
    keep[12:16] = False   # target
    keep[10:12] = False   # ip checksum
    keep[36:38] = False   # tcp checksum
    for r in range(5):
        assert hashlib.sha256(out.data[r][keep].tobytes()).digest() == hashlib.sha256(t.data[r][keep].tobytes()).digest()
    # repaired checksums verify
    hdr = out.data[0, :20].tobytes()
    assert internet_checksum(hdr) == 0


def test_zero_idempotent(synth_tensors):
    spec = OcclusionSpec("zero", ("SII", "SNI"))
    for t in synth_tensors[:20]:
        once = apply_occlusion(t, spec)
        assert np.array_equal(apply_occlusion(once, spec).data, once.data)


def test_relative_seq_example():
    s = make_session([(1.0, tcp(1000, b"x" * 60)), (1.1, tcp(1060)), (1.2, tcp(1060))])
    out = apply_occlusion(build_session_tensor(s), OcclusionSpec("relative", ("tcp.seq_raw",)))
    vals = [int.from_bytes(out.field_bytes(r, "tcp.seq_raw"), "big") for r in range(3)]
    assert vals == [0, 60, 0]


def test_relative_negative_twos_complement():
    s = make_session([(1.0, tcp(1000)), (1.1, tcp(990))])
    out = apply_occlusion(build_session_tensor(s), OcclusionSpec("relative", ("tcp.seq_raw",)))
    assert out.field_bytes(1, "tcp.seq_raw") == struct.pack("!i", -10)


def test_random_deterministic_and_consistent(synth_tensors):
    spec = OcclusionSpec("random", ("SII",), seed=42)
    for t in synth_tensors[:30]:
        a, b = apply_occlusion(t, spec), apply_occlusion(t, spec)
        assert np.array_equal(a.data, b.data)
        mapping = {}
        for r in range(t.n_packets):
            for name in ("ip.src", "ip.dst"):
                orig, new = t.field_bytes(r, name), a.field_bytes(r, name)
                assert mapping.setdefault(orig, new) == new
        assert len(set(mapping.values())) == len(mapping)
    other = apply_occlusion(synth_tensors[0], OcclusionSpec("random", ("SII",), seed=43))
    assert not np.array_equal(other.data, apply_occlusion(synth_tensors[0], spec).data)


def test_random_shift_preserves_differences(synth_tensors):
    spec = OcclusionSpec("random", ("SEQ_ACK", "TCP_TIMESTAMP"), seed=7)
    for t in synth_tensors[:30]:
        out = apply_occlusion(t, spec)
        for name in ("tcp.seq_raw", "tcp.ack_raw", "tcp.options.timestamp.tsval"):
            rows = [r for r in range(5) if name in t.offset_map[r]]
            orig = [int.from_bytes(t.field_bytes(r, name), "big") for r in rows]
            new = [int.from_bytes(out.field_bytes(r, name), "big") for r in rows]
            for i in range(1, len(rows)):
                assert (new[i] - new[i - 1]) % 2**32 == (orig[i] - orig[i - 1]) % 2**32


def test_checksums_valid_after_random_sii(synth_tensors):
    spec = OcclusionSpec("random", ("SII",), seed=1)
    for t in synth_tensors[:30]:
        out = apply_occlusion(t, spec)
        for r, info in enumerate(out.rows):
            if info is None:
                continue
            assert internet_checksum(out.data[r, :info.ip_header_len].tobytes()) == 0
            if FLAG_L4_ZEROED in out.flags[r]:
                continue
            end = info.ip_header_len + info.transport_header_len
            seg = out.data[r, 20:end].tobytes() + out.data[r, 80:80 + info.ip_total_length - end].tobytes()
            stored = int.from_bytes(out.data[r, 36:38].tobytes(), "big")
            assert transport_checksum(out.data[r, 12:16].tobytes(), out.data[r, 16:20].tobytes(), 6, seg, 16) == stored


def test_recompute_idempotent_and_identity_on_valid_rows(synth_tensors):
    for t in synth_tensors[:20]:
        for r, info in enumerate(t.rows):
            if info is None:
                continue
            once, f1 = recompute_checksums(t.data[r], info)
            twice, f2 = recompute_checksums(once, info)
            assert np.array_equal(once, twice) and f1 == f2
            if not f1:
                assert np.array_equal(once, t.data[r])


def test_truncated_payload_zeroes_transport_checksum():
    s = make_session([(1.0, tcp(1, b"z" * 500))])
    t = build_session_tensor(s)
    row, flags = recompute_checksums(t.data[0], t.rows[0])
    assert FLAG_L4_ZEROED in flags
    assert row[36:38].tolist() == [0, 0]


def test_sni_zeroed_hostname_only(synth_tensors):
    with_sni = [t for t in synth_tensors if any("tls.handshake.extensions_server_name" in m for m in t.offset_map)]
    assert with_sni
    t = with_sni[0]
    out = apply_occlusion(t, OcclusionSpec("zero", ("SNI",)))
    r = next(i for i, m in enumerate(t.offset_map) if "tls.handshake.extensions_server_name" in m)
    _, start, length = t.offset_map[r]["tls.handshake.extensions_server_name"]
    assert not out.data[r, start:start + length].any()
    assert out.data[r, start - 2:start].tobytes() == t.data[r, start - 2:start].tobytes()


def test_unknown_and_absent_targets(synth_tensors):
    with pytest.raises(OcclusionError):
        OcclusionSpec("zero", ("ip.nonsense",))
    with pytest.raises(OcclusionError):
        OcclusionSpec("smudge", ("SII",))
    with pytest.raises(OcclusionError):
        OcclusionSpec("relative", ("SNI",))
    out = apply_occlusion(synth_tensors[0], OcclusionSpec("zero", ("udp.srcport",)))
    assert np.array_equal(out.data, synth_tensors[0].data)
    assert out.warnings and "udp.srcport" in out.warnings[0]


def test_group_alias_resolution():
    assert resolve_targets(["sii"])[:2] == ["ip.src", "ip.dst"]
    assert resolve_targets(["TCP_TIMESTAMP", "tcp.options.timestamp.tsval"]) == [
        "tcp.options.timestamp.tsval", "tcp.options.timestamp.tsecr"]


def test_container_roundtrip_and_pcap(tmp_path, synth_tensors):
    path, index = write_tensors(tmp_path / "t.bin", synth_tensors)
    data, labels, idx = read_tensors(path)
    assert data.shape == (len(synth_tensors), 5, 320)
    assert np.array_equal(data[3], synth_tensors[3].data)
    assert idx["class_names"][labels[3]] == synth_tensors[3].label
    assert idx["count"] == len(synth_tensors)
    occluded = [apply_occlusion(t, OcclusionSpec("random", ("SII",), seed=5)) for t in synth_tensors]
    n = write_occluded_pcap(tmp_path / "o.pcap", occluded)
    batch = dissect_capture(tmp_path / "o.pcap")
    assert len(batch.records) == n == sum(t.n_packets for t in occluded)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(0, 3000), min_size=1, max_size=6),
       st.sampled_from(["zero", "relative"]))
def test_byte_locality_property(start, steps, strategy):
    frames, seq = [], start
    for i, step in enumerate(steps):
        frames.append((1.0 + i, tcp(seq % 2**32, b"p" * (i + 1))))
        seq += step
    t = build_session_tensor(make_session(frames))
    out = apply_occlusion(t, OcclusionSpec(strategy, ("tcp.seq_raw", "ip.ttl")))
    allowed = np.zeros(320, dtype=bool)
    allowed[[4 + 20 + i for i in range(4)]] = True  # seq
    allowed[8] = True                               # ttl
    allowed[10:12] = True                           # ip checksum
    allowed[36:38] = True                           # tcp checksum
    for r in range(5):
        assert np.array_equal(out.data[r][~allowed], t.data[r][~allowed])

"""Synthetic labeled captures with planted shortcuts and genuine class signals.

Flows are generated byte by byte (Ethernet/IPv4/TCP with valid checksums and a
three-way handshake) so that every downstream stage runs on the real data path.
Each planted mechanism is recorded in a JSON manifest as ground truth.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checksum import ipv4_header_checksum, transport_checksum
from .ingest.capture import write_pcap
from .ingest.packets import ip_to_int

SHORTCUTS = ("sii_bijection", "session_constant_highbits", "env_coupled_window", "sni_leak")
SIGNALS = ("payload_length_profile", "payload_byte_profile")
HIGHBIT_FIELDS = ("tcp.seq_raw", "tcp.options.timestamp.tsval")

CLIENT_MAC = bytes.fromhex("020000000001")
GATEWAY_MAC = bytes.fromhex("0200000000fe")
SERVER_PORT = 443
CLIENT_TTL = 64
SERVER_TTL = 52
MAX_PAYLOAD = 1400
WINDOW_SD = 3000.0

TCP_SYN, TCP_ACK, TCP_PSH = 0x02, 0x10, 0x08


@dataclass(frozen=True)
class Environment:
    tag: str
    shift: float = 0.0


@dataclass
class SynthSpec:
    n_classes: int
    flows_per_class: int
    seed: int
    packets_per_flow: tuple[int, int] = (8, 16)
    shortcuts: tuple[str, ...] = ()
    signals: tuple[str, ...] = ()
    environments: tuple[Environment, ...] = (Environment("env0", 0.0),)
    highbits_field: str = "tcp.seq_raw"
    reverse_ratio: float = 0.4
    sii_pool_size: int = 1
    server_pool_size: int = 16
    capture_duration: float = 60.0
    start_epoch: int = 1_600_000_000

    def validate(self) -> None:
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if self.flows_per_class < 1:
            raise ValueError("flows_per_class must be positive")
        lo, hi = self.packets_per_flow
        if lo < 3 or hi < lo:
            raise ValueError("packets_per_flow must satisfy 3 <= lo <= hi (handshake needs 3 packets)")
        if not self.shortcuts and not self.signals:
            raise ValueError("at least one planted shortcut or genuine signal is required")
        for name in self.shortcuts:
            if name not in SHORTCUTS:
                raise ValueError(f"unknown shortcut {name!r}; choose from {SHORTCUTS}")
        for name in self.signals:
            if name not in SIGNALS:
                raise ValueError(f"unknown signal {name!r}; choose from {SIGNALS}")
        if "session_constant_highbits" in self.shortcuts:
            if self.highbits_field not in HIGHBIT_FIELDS:
                raise ValueError(f"highbits_field must be one of {HIGHBIT_FIELDS}")
            if self.n_classes > 255:
                raise ValueError("session_constant_highbits supports at most 255 classes")
        if not self.environments:
            raise ValueError("at least one environment is required")
        if len({e.tag for e in self.environments}) != len(self.environments):
            raise ValueError("environment tags must be unique")
        if not 0.0 <= self.reverse_ratio <= 1.0:
            raise ValueError("reverse_ratio must lie in [0, 1]")
        if self.sii_pool_size < 1 or self.server_pool_size < 1:
            raise ValueError("address pools must be non-empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["packets_per_flow"] = list(self.packets_per_flow)
        d["shortcuts"] = list(self.shortcuts)
        d["signals"] = list(self.signals)
        d["environments"] = [asdict(e) for e in self.environments]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["packets_per_flow"] = tuple(d.get("packets_per_flow", (8, 16)))
        d["shortcuts"] = tuple(d.get("shortcuts", ()))
        d["signals"] = tuple(d.get("signals", ()))
        envs = d.get("environments")
        if envs is not None:
            d["environments"] = tuple(
                Environment(**e) if isinstance(e, dict) else Environment(*e) for e in envs
            )
        return cls(**d)


@dataclass
class SyntheticCapture:
    environment: str
    label: str
    frames: list[tuple[int, bytes]] = field(default_factory=list)

    @property
    def name(self) -> str:
        return f"{self.environment}/{self.label}"


@dataclass
class SyntheticDataset:
    captures: list[SyntheticCapture]
    manifest: dict


def class_label(index: int) -> str:
    return f"class{index:02d}"


def client_pool(spec: SynthSpec, cls: int) -> list[str]:
    if "sii_bijection" in spec.shortcuts:
        # disjoint /16 per class
        return [f"10.{cls + 1}.{i // 250}.{i % 250 + 1}" for i in range(spec.sii_pool_size)]
    return [f"192.168.{i // 250}.{i % 250 + 2}" for i in range(64)]


def server_pool(spec: SynthSpec) -> list[str]:
    return [f"203.0.113.{i + 1}" for i in range(spec.server_pool_size)]


def length_mean(spec: SynthSpec, cls: int) -> float:
    step = (MAX_PAYLOAD - 200) / max(spec.n_classes - 1, 1)
    return 100.0 + cls * step


def length_sd(spec: SynthSpec) -> float:
    step = (MAX_PAYLOAD - 200) / max(spec.n_classes - 1, 1)
    return max(step / 8.0, 2.0)


def window_params(spec: SynthSpec, cls: int, env: Environment) -> tuple[float, float]:
    """Mean and sd of tcp.window_size for one class in one environment."""
    if "env_coupled_window" not in spec.shortcuts:
        return 29200.0, WINDOW_SD
    base = 8000.0 + cls * (40000.0 / max(spec.n_classes, 1))
    # shifted environments move the mean down and concentrate the distribution
    return base * (1.0 - 0.3 * min(env.shift, 3.0)), WINDOW_SD / (1.0 + env.shift)


def sni_domain(cls: int) -> str:
    return f"app{cls:02d}.com"


def _flow_rng(spec: SynthSpec, env_index: int, cls: int, flow: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, env_index, cls, flow]))


def _tcp_options(tsval: int, tsecr: int, syn: bool) -> bytes:
    ts = struct.pack("!BBII", 8, 10, tsval & 0xFFFFFFFF, tsecr & 0xFFFFFFFF)
    if syn:
        return struct.pack("!BBH", 2, 4, 1460) + b"\x04\x02" + ts + b"\x01" + b"\x03\x03\x07"
    return b"\x01\x01" + ts


def build_tcp_frame(
    src_ip: str, dst_ip: str, sport: int, dport: int, seq: int, ack: int, flags: int,
    window: int, options: bytes, payload: bytes, ip_id: int, ttl: int,
    src_mac: bytes = CLIENT_MAC, dst_mac: bytes = GATEWAY_MAC,
) -> bytes:
    """Ethernet + IPv4 (no options) + TCP frame with correct checksums."""
    if len(options) % 4:
        options += b"\x00" * (4 - len(options) % 4)
    thl = 20 + len(options)
    src = struct.pack("!I", ip_to_int(src_ip))
    dst = struct.pack("!I", ip_to_int(dst_ip))
    tcp = bytearray(struct.pack(
        "!HHIIBBHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
        (thl // 4) << 4, flags, window, 0, 0,
    ) + options + payload)
    csum = transport_checksum(src, dst, 6, bytes(tcp), 16)
    tcp[16:18] = struct.pack("!H", csum)
    total = 20 + len(tcp)
    ip = bytearray(struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, ip_id & 0xFFFF, 0x4000, ttl, 6, 0, src, dst))
    ip[10:12] = struct.pack("!H", ipv4_header_checksum(bytes(ip)))
    return dst_mac + src_mac + b"\x08\x00" + bytes(ip) + bytes(tcp)


def client_hello(hostname: str, rng: np.random.Generator) -> bytes:
    """Syntactically valid TLS 1.2 ClientHello carrying a server_name extension."""
    name = hostname.encode("ascii")
    sni_ext = struct.pack("!HHHBH", 0x0000, len(name) + 5, len(name) + 3, 0, len(name)) + name
    extensions = sni_ext + struct.pack("!HH", 0x000A, 4) + b"\x00\x02\x00\x1d"
    body = (
        b"\x03\x03" + rng.bytes(32)
        + b"\x20" + rng.bytes(32)
        + struct.pack("!H", 4) + b"\x13\x01\x13\x02"
        + b"\x01\x00"
        + struct.pack("!H", len(extensions)) + extensions
    )
    handshake = b"\x01" + struct.pack("!I", len(body))[1:] + body
    return b"\x16\x03\x01" + struct.pack("!H", len(handshake)) + handshake


def _payload(spec: SynthSpec, cls: int, rng: np.random.Generator) -> bytes:
    if "payload_length_profile" in spec.signals:
        n = int(round(rng.normal(length_mean(spec, cls), length_sd(spec))))
    else:
        n = int(rng.integers(40, MAX_PAYLOAD + 1))
    n = min(max(n, 1), MAX_PAYLOAD)
    data = bytearray(rng.bytes(n))
    if "payload_byte_profile" in spec.signals:
        marks = rng.random(min(n, 16)) < 0.7
        for j, hit in enumerate(marks):
            if hit:
                data[j] = (cls * 37 + j * 11) & 0xFF
    return bytes(data)


def _window(spec: SynthSpec, cls: int, env: Environment, rng: np.random.Generator) -> int:
    mean, sd = window_params(spec, cls, env)
    return min(max(int(round(rng.normal(mean, sd))), 1), 65535)


def generate_flow(
    spec: SynthSpec, env_index: int, cls: int, flow: int
) -> list[tuple[int, int, bytes]]:
    """Frames of one TCP flow as ``(timestamp_usec, packet_index, frame)``."""
    env = spec.environments[env_index]
    rng = _flow_rng(spec, env_index, cls, flow)
    clients, servers = client_pool(spec, cls), server_pool(spec)
    client_ip = clients[int(rng.integers(len(clients)))]
    server_ip = servers[int(rng.integers(len(servers)))]
    client_port = int(rng.integers(32768, 61000))
    lo, hi = spec.packets_per_flow
    n_packets = int(rng.integers(lo, hi + 1))

    highbits = "session_constant_highbits" in spec.shortcuts
    rand32 = lambda: int(rng.integers(0, 2**32))  # noqa: E731
    isn_c, ts_base_c, isn_s, ts_base_s = rand32(), rand32(), rand32(), rand32()
    # both endpoints of the session share the class-coded high byte
    if highbits and spec.highbits_field == "tcp.seq_raw":
        isn_c = ((cls + 1) << 24) | int(rng.integers(0, 2**20))
        isn_s = ((cls + 1) << 24) | int(rng.integers(0, 2**20))
    if highbits and spec.highbits_field == "tcp.options.timestamp.tsval":
        ts_base_c = ((cls + 1) << 24) | int(rng.integers(0, 2**20))
        ts_base_s = ((cls + 1) << 24) | int(rng.integers(0, 2**20))
    ipid = {0: int(rng.integers(0, 65536)), 1: int(rng.integers(0, 65536))}

    t0 = float(rng.uniform(0.0, spec.capture_duration))
    start_usec = spec.start_epoch * 1_000_000
    # next sequence number per side, last tsval seen from the peer
    nxt = {0: isn_c, 1: isn_s}
    last_ts = {0: 0, 1: 0}

    plan: list[tuple[int, int]] = [(0, TCP_SYN), (1, TCP_SYN | TCP_ACK), (0, TCP_ACK)]
    for i in range(n_packets - 3):
        side = 0 if i == 0 else int(rng.random() < spec.reverse_ratio)
        plan.append((side, TCP_PSH | TCP_ACK))

    frames = []
    t = t0
    for idx, (side, flags) in enumerate(plan):
        if idx:
            t += float(rng.exponential(0.02)) + 1e-5
        ts_usec = start_usec + int(round(t * 1e6))
        clock = ts_base_c if side == 0 else ts_base_s
        tsval = (clock + int((t - t0) * 1000)) & 0xFFFFFFFF
        tsecr = last_ts[1 - side] if idx else 0
        syn = bool(flags & TCP_SYN)
        if flags & TCP_PSH:
            if side == 0 and idx == 3 and "sni_leak" in spec.shortcuts:
                host = f"cdn{int(rng.integers(0, 100))}.{sni_domain(cls)}"
                payload = client_hello(host, rng)
            else:
                payload = _payload(spec, cls, rng)
        else:
            payload = b""
        seq = nxt[side]
        ack = nxt[1 - side] if flags & TCP_ACK else 0
        window = _window(spec, cls, env, rng)
        if side == 0:
            frame = build_tcp_frame(client_ip, server_ip, client_port, SERVER_PORT, seq, ack, flags,
                                    window, _tcp_options(tsval, tsecr, syn), payload,
                                    ipid[0], CLIENT_TTL, CLIENT_MAC, GATEWAY_MAC)
        else:
            frame = build_tcp_frame(server_ip, client_ip, SERVER_PORT, client_port, seq, ack, flags,
                                    window, _tcp_options(tsval, tsecr, syn), payload,
                                    ipid[1], SERVER_TTL, GATEWAY_MAC, CLIENT_MAC)
        ipid[side] += 1
        nxt[side] = (seq + len(payload) + (1 if syn else 0)) & 0xFFFFFFFF
        last_ts[side] = tsval
        frames.append((ts_usec, idx, frame))
    return frames


def generate_synthetic_dataset(spec: SynthSpec) -> SyntheticDataset:
    """Generate one capture per (environment, class) plus a ground-truth manifest."""
    spec.validate()
    captures = []
    for e, env in enumerate(spec.environments):
        for c in range(spec.n_classes):
            tagged = []
            for f in range(spec.flows_per_class):
                tagged.extend((ts, f, idx, frame) for ts, idx, frame in generate_flow(spec, e, c, f))
            tagged.sort(key=lambda x: (x[0], x[1], x[2]))
            captures.append(SyntheticCapture(env.tag, class_label(c), [(ts, fr) for ts, _, _, fr in tagged]))
    return SyntheticDataset(captures, build_manifest(spec))


def build_manifest(spec: SynthSpec) -> dict:
    planted: dict[str, dict] = {}
    classes = [class_label(c) for c in range(spec.n_classes)]
    if "sii_bijection" in spec.shortcuts:
        planted["sii_bijection"] = {
            "field": "ip.src", "category": "DataLeakage",
            "client_pools": {class_label(c): client_pool(spec, c) for c in range(spec.n_classes)},
        }
    if "session_constant_highbits" in spec.shortcuts:
        planted["session_constant_highbits"] = {
            "field": spec.highbits_field, "category": "RelativeArtifact",
            "high_byte": {class_label(c): c + 1 for c in range(spec.n_classes)},
        }
    if "env_coupled_window" in spec.shortcuts:
        planted["env_coupled_window"] = {
            "field": "tcp.window_size", "category": "TaskAgnostic",
            "params": {
                env.tag: {class_label(c): list(window_params(spec, c, env)) for c in range(spec.n_classes)}
                for env in spec.environments
            },
        }
    if "sni_leak" in spec.shortcuts:
        planted["sni_leak"] = {
            "field": "tls.handshake.extensions_server_name", "category": "DataLeakage",
            "domains": {class_label(c): sni_domain(c) for c in range(spec.n_classes)},
        }
    signals: dict[str, dict] = {}
    if "payload_length_profile" in spec.signals:
        signals["payload_length_profile"] = {
            "fields": ["ip.len", "tcp.len"],
            "mean": {class_label(c): length_mean(spec, c) for c in range(spec.n_classes)},
            "sd": length_sd(spec),
        }
    if "payload_byte_profile" in spec.signals:
        signals["payload_byte_profile"] = {"bytes": 16, "hit_rate": 0.7}
    return {"spec": spec.to_dict(), "classes": classes, "planted": planted, "signals": signals}


def write_synthetic_dataset(spec: SynthSpec, out_dir: str | Path) -> tuple[list[dict], dict]:
    """Write ``<env>/<class>.pcap`` files and ``manifest.json``; returns (inputs, manifest)."""
    out = Path(out_dir)
    data = generate_synthetic_dataset(spec)
    inputs = []
    for cap in data.captures:
        path = out / cap.environment / f"{cap.label}.pcap"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pcap(path, cap.frames)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        inputs.append({"path": str(path), "label": cap.label, "dataset_tag": cap.environment,
                       "packets": len(cap.frames), "sha256": digest})
    manifest = dict(data.manifest)
    manifest["files"] = [{k: v for k, v in i.items()} for i in inputs]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return inputs, manifest


def assemble_synthetic(data: SyntheticDataset):
    """Dissect and assemble a generated dataset in memory.

    Returns ``(records, sessions)`` exactly as the capture path
    would, with each capture's source named ``<env>/<class>``.
    """
    from .ingest.dissect import dissect_frames
    from .ingest.sessions import LabelRule, assemble_sessions

    records, pairs = [], []
    rule = LabelRule()
    for cap in data.captures:
        frames = ((i + 1, ts / 1e6, fr, 1) for i, (ts, fr) in enumerate(cap.frames))
        batch = dissect_frames(frames, cap.name)
        rule.by_source[cap.name] = cap.label
        rule.tag_by_source[cap.name] = cap.environment
        records.extend(batch.records)
        pairs.extend(zip(batch.records, batch.parsed))
    return records, assemble_sessions(pairs, rule)

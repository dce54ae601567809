"""Field encoding into an integer/float feature matrix with a validity mask."""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest.packets import FORWARD, PacketRecord
from .ingest.sessions import Session

log = logging.getLogger(__name__)

IPV4 = "ipv4_address"
HEX_OR_INT = "hex_or_int"
FLOAT_TEMPORAL = "float_temporal"
DOMAIN_NAME = "domain_name"
OPAQUE = "opaque_categorical"
KINDS = (IPV4, HEX_OR_INT, FLOAT_TEMPORAL, DOMAIN_NAME, OPAQUE)

SENTINEL = -1
MIN_VALID_FRACTION = 0.05
INT64_MAX = 2**63 - 1

_DOTTED_QUAD = re.compile(r"^\d{1,3}\.\d{1,3}\.\d{1,3}\.\d{1,3}$")
_DOMAIN_FIELDS = ("server_name", "dns.qry.name", "http.host", "tls.handshake.extensions_server_name")
_IPV4_FIELDS = {"ip.src", "ip.dst", "ip.addr", "ip.src_host", "ip.dst_host"}


class Codebook:
    """Insertion-ordered string -> dense integer index."""

    def __init__(self, items: Iterable[str] = ()):
        self._index: dict[str, int] = {}
        for item in items:
            self.add(item)

    def add(self, key: str) -> int:
        idx = self._index.get(key)
        if idx is None:
            idx = self._index[key] = len(self._index)
        return idx

    def get(self, key: str) -> int | None:
        return self._index.get(key)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Codebook) and list(self._index.items()) == list(other._index.items())

    def keys(self) -> list[str]:
        return list(self._index)

    def to_dict(self) -> dict[str, int]:
        return dict(self._index)


class DomainDict(Codebook):
    """Second-level domain -> index, shared by every domain-name field of a run."""


@dataclass(frozen=True)
class FieldSchema:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")


@dataclass(frozen=True)
class EncodedValue:
    value: int | float
    valid: bool


INVALID = EncodedValue(SENTINEL, False)


def second_level_domain(name: str) -> str:
    labels = [p for p in name.strip().rstrip(".").lower().split(".") if p]
    if len(labels) < 2:
        return ".".join(labels) if labels else name
    return ".".join(labels[-2:])


def build_domain_dictionary(values: Iterable[str]) -> DomainDict:
    """Index second-level domains in first-seen order.

    Takes the last two dotted labels; public suffixes such as ``co.uk`` are not
    special-cased.
    """
    d = DomainDict()
    for v in values:
        if v:
            d.add(second_level_domain(v))
    return d


def parse_ipv4(raw: str) -> int | None:
    if not _DOTTED_QUAD.match(raw):
        return None
    value = 0
    for octet in raw.split("."):
        o = int(octet)
        if o > 255:
            return None
        value = value * 256 + o
    return value


def parse_hex_or_int(raw: str) -> int | None:
    s = raw.strip()
    if not s:
        return None
    try:
        if s[:2].lower() == "0x":
            return int(s, 16)
        return int(s, 10)
    except ValueError:
        pass
    try:
        return int(s, 16)
    except ValueError:
        return None


def parse_float(raw: str) -> float | None:
    try:
        v = float(raw)
    except ValueError:
        return None
    return v if np.isfinite(v) else None


def encode_field(raw: str | None, schema: FieldSchema, dictionary: Codebook | None = None) -> EncodedValue:
    """Encode one raw value; anything unconvertible comes back invalid, never raises."""
    if raw is None or raw == "":
        return INVALID
    kind = schema.kind
    if kind == IPV4:
        v = parse_ipv4(raw)
    elif kind == HEX_OR_INT:
        v = parse_hex_or_int(raw)
    elif kind == FLOAT_TEMPORAL:
        v = parse_float(raw)
    elif kind == DOMAIN_NAME:
        if dictionary is None:
            raise ValueError("domain_name fields need a DomainDict")
        v = dictionary.add(second_level_domain(raw))
    else:
        if dictionary is None:
            raise ValueError("opaque_categorical fields need a Codebook")
        v = dictionary.add(raw)
    if v is None:
        return INVALID
    return EncodedValue(v, True)


def infer_kind(name: str, values: Sequence[str]) -> str:
    """Pick one encoding kind for a field from its name and observed values."""
    low = name.lower()
    if name in _IPV4_FIELDS:
        return IPV4
    if any(tag in low for tag in _DOMAIN_FIELDS):
        return DOMAIN_NAME
    vals = [v for v in values if v != ""]
    if not vals:
        return OPAQUE
    if "time" in low or low.endswith(".delta"):
        if all(parse_float(v) is not None for v in vals):
            return FLOAT_TEMPORAL
    if all(_DOTTED_QUAD.match(v) for v in vals):
        return IPV4
    if all(_looks_integer(v) for v in vals):
        return HEX_OR_INT
    if all(parse_float(v) is not None for v in vals):
        return FLOAT_TEMPORAL
    return OPAQUE


def _looks_integer(v: str) -> bool:
    s = v.strip()
    if s[:2].lower() == "0x":
        return parse_hex_or_int(s) is not None
    return s.lstrip("-").isdigit()


def infer_schemas(records: Iterable[PacketRecord], sample_limit: int = 2000) -> dict[str, FieldSchema]:
    """Infer a schema per field name over a dataset (first ``sample_limit`` values each)."""
    samples: dict[str, list[str]] = {}
    for rec in records:
        for k, v in rec.fields.items():
            bucket = samples.setdefault(k, [])
            if len(bucket) < sample_limit:
                bucket.append(v)
    schemas = {}
    for name in sorted(samples):
        schemas[name] = FieldSchema(name, infer_kind(name, samples[name]))
        log.debug("field %s inferred as %s", name, schemas[name].kind)
    return schemas


@dataclass
class QualityReport:
    total: int = 0
    kept: int = 0
    dropped: dict[str, int] = field(default_factory=dict)

    def drop(self, reason: str) -> None:
        self.dropped[reason] = self.dropped.get(reason, 0) + 1

    def to_dict(self) -> dict:
        return {"total": self.total, "kept": self.kept, "dropped": dict(sorted(self.dropped.items()))}


def valid_fraction(rec: PacketRecord, schemas: dict[str, FieldSchema]) -> float:
    if not schemas:
        return 0.0
    n_valid = 0
    for name, raw in rec.fields.items():
        schema = schemas.get(name)
        if schema is None or raw == "":
            continue
        if schema.kind in (DOMAIN_NAME, OPAQUE):
            n_valid += 1
        elif encode_field(raw, schema).valid:
            n_valid += 1
    return n_valid / len(schemas)


def filter_low_quality(
    records: Iterable[PacketRecord],
    schemas: dict[str, FieldSchema],
    min_valid_fraction: float = MIN_VALID_FRACTION,
) -> tuple[list[PacketRecord], QualityReport]:
    """Drop packets with too few valid fields or an unusable IPv4 address pair.

    The threshold is strict: a packet at exactly ``min_valid_fraction`` is kept.
    """
    report = QualityReport()
    kept = []
    for rec in records:
        report.total += 1
        src, dst = rec.fields.get("ip.src"), rec.fields.get("ip.dst")
        if src is None or dst is None:
            report.drop("missing_ip")
            continue
        if parse_ipv4(src) is None or parse_ipv4(dst) is None:
            report.drop("malformed_ip")
            continue
        if valid_fraction(rec, schemas) < min_valid_fraction:
            report.drop("low_valid_fraction")
            continue
        kept.append(rec)
    report.kept = len(kept)
    return kept, report


@dataclass
class FeatureMatrix:
    """Per-packet feature table.

    ``values[name]`` holds int64 (or float64 for temporal fields) codes,
    ``valid[name]`` the validity channel; invalid cells carry ``SENTINEL``.
    """

    columns: list[str]
    values: dict[str, np.ndarray]
    valid: dict[str, np.ndarray]
    labels: np.ndarray
    class_names: list[str]
    dataset_tags: np.ndarray
    session_index: np.ndarray
    directions: np.ndarray
    schemas: dict[str, FieldSchema] = field(default_factory=dict)
    session_ids: list[str] = field(default_factory=list)
    domain_dict: DomainDict = field(default_factory=DomainDict)
    excluded_packets: int = 0

    @classmethod
    def from_columns(
        cls,
        columns: dict[str, Sequence],
        labels: Sequence,
        valid: dict[str, Sequence[bool]] | None = None,
        dataset_tags: Sequence[str] | None = None,
    ) -> "FeatureMatrix":
        """Build a matrix straight from arrays; labels may be any hashable values."""
        names = sorted(set(labels))
        idx = {c: i for i, c in enumerate(names)}
        n = len(labels)
        values = {k: np.asarray(v) for k, v in columns.items()}
        masks = {k: np.ones(n, dtype=bool) for k in columns}
        for k, m in (valid or {}).items():
            masks[k] = np.asarray(m, dtype=bool)
        return cls(
            columns=sorted(columns),
            values=values,
            valid=masks,
            labels=np.array([idx[c] for c in labels], dtype=np.int64),
            class_names=[str(c) for c in names],
            dataset_tags=np.array(dataset_tags if dataset_tags is not None else ["default"] * n, dtype=object),
            session_index=np.arange(n, dtype=np.int64),
            directions=np.zeros(n, dtype=np.int8),
        )

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_samples, len(self.columns)

    def column(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.values[name], self.valid[name]

    def subset(self, rows: np.ndarray) -> "FeatureMatrix":
        rows = np.asarray(rows)
        return FeatureMatrix(
            columns=list(self.columns),
            values={k: v[rows] for k, v in self.values.items()},
            valid={k: v[rows] for k, v in self.valid.items()},
            labels=self.labels[rows],
            class_names=list(self.class_names),
            dataset_tags=self.dataset_tags[rows],
            session_index=self.session_index[rows],
            directions=self.directions[rows],
            schemas=dict(self.schemas),
            session_ids=list(self.session_ids),
            domain_dict=self.domain_dict,
        )

    def for_tag(self, tag: str) -> "FeatureMatrix":
        return self.subset(np.flatnonzero(self.dataset_tags == tag))

    def save(self, prefix: str | Path) -> list[Path]:
        """Write ``<prefix>_values.csv``, ``<prefix>_valid.csv`` and ``<prefix>.json``."""
        prefix = Path(prefix)
        vpath = prefix.with_name(prefix.name + "_values.csv")
        mpath = prefix.with_name(prefix.name + "_valid.csv")
        jpath = prefix.with_name(prefix.name + ".json")
        with open(vpath, "w", newline="") as fv, open(mpath, "w", newline="") as fm:
            wv, wm = csv.writer(fv), csv.writer(fm)
            wv.writerow(self.columns)
            wm.writerow(self.columns)
            cols_v = [self.values[c] for c in self.columns]
            cols_m = [self.valid[c] for c in self.columns]
            for i in range(self.n_samples):
                wv.writerow([_fmt(col[i]) for col in cols_v])
                wm.writerow([int(col[i]) for col in cols_m])
        side = {
            "columns": self.columns,
            "dtypes": {c: str(self.values[c].dtype) for c in self.columns},
            "schemas": {c: self.schemas[c].kind for c in self.columns if c in self.schemas},
            "domain_dict": self.domain_dict.to_dict(),
            "class_names": self.class_names,
            "labels": self.labels.tolist(),
            "dataset_tags": self.dataset_tags.tolist(),
            "session_index": self.session_index.tolist(),
            "directions": self.directions.tolist(),
            "session_ids": self.session_ids,
            "excluded_packets": self.excluded_packets,
        }
        jpath.write_text(json.dumps(side, sort_keys=True) + "\n")
        return [vpath, mpath, jpath]

    @classmethod
    def load(cls, prefix: str | Path) -> "FeatureMatrix":
        prefix = Path(prefix)
        side = json.loads(prefix.with_name(prefix.name + ".json").read_text())
        columns = side["columns"]
        n = len(side["labels"])
        raw_v: dict[str, list] = {c: [] for c in columns}
        raw_m: dict[str, list] = {c: [] for c in columns}
        with open(prefix.with_name(prefix.name + "_values.csv"), newline="") as fv:
            reader = csv.reader(fv)
            next(reader)
            for row in reader:
                for c, cell in zip(columns, row):
                    raw_v[c].append(cell)
        with open(prefix.with_name(prefix.name + "_valid.csv"), newline="") as fm:
            reader = csv.reader(fm)
            next(reader)
            for row in reader:
                for c, cell in zip(columns, row):
                    raw_m[c].append(cell == "1")
        values = {}
        for c in columns:
            dtype = np.dtype(side["dtypes"][c])
            values[c] = np.array([dtype.type(float(x)) if dtype.kind == "f" else int(x) for x in raw_v[c]],
                                 dtype=dtype).reshape(n)
        return cls(
            columns=columns,
            values=values,
            valid={c: np.array(raw_m[c], dtype=bool).reshape(n) for c in columns},
            labels=np.array(side["labels"], dtype=np.int64),
            class_names=side["class_names"],
            dataset_tags=np.array(side["dataset_tags"], dtype=object),
            session_index=np.array(side["session_index"], dtype=np.int64),
            directions=np.array(side["directions"], dtype=np.int8),
            schemas={c: FieldSchema(c, k) for c, k in side["schemas"].items()},
            session_ids=side["session_ids"],
            domain_dict=DomainDict(side["domain_dict"]),
            excluded_packets=side.get("excluded_packets", 0),
        )


def encode_column(raws: Sequence[str | None], schema: FieldSchema, book: Codebook | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised counterpart of ``encode_field`` for a whole column."""
    n = len(raws)
    kind = schema.kind
    if kind == FLOAT_TEMPORAL:
        parse = parse_float
    elif kind == IPV4:
        parse = parse_ipv4
    elif kind == HEX_OR_INT:
        parse = parse_hex_or_int
    elif kind == DOMAIN_NAME:
        parse = lambda raw: book.add(second_level_domain(raw))  # noqa: E731
    else:
        parse = book.add
    # parse each distinct raw string once, in first-occurrence order so codebooks stay stable
    mapping = {raw: parse(raw) for raw in dict.fromkeys(raws) if raw is not None and raw != ""}
    parsed = [mapping.get(raw) if raw is not None else None for raw in raws]
    mask = np.fromiter((v is not None for v in parsed), dtype=bool, count=n)
    out = [SENTINEL if v is None else v for v in parsed]
    if kind == FLOAT_TEMPORAL:
        col = np.array(out, dtype=np.float64) if n else np.zeros(0)
    elif any(abs(v) > INT64_MAX for v in mapping.values() if v is not None):
        log.warning("field %s exceeds int64; stored as float64", schema.name)
        col = np.array(out, dtype=np.float64)
    else:
        col = np.array(out, dtype=np.int64) if n else np.zeros(0, dtype=np.int64)
    col[~mask] = SENTINEL
    return col, mask


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(int(x))


def build_feature_matrix(
    sessions: Sequence[Session],
    records: Iterable[PacketRecord],
    schemas: dict[str, FieldSchema],
    domain_dict: DomainDict | None = None,
) -> FeatureMatrix:
    """One row per retained packet, columns = union of observed field names.

    ``records`` is the quality-filtered stream; session packets missing from it
    are skipped, and records owned by no session are counted as excluded.
    """
    domain_dict = domain_dict if domain_dict is not None else DomainDict()
    retained = {(r.source, r.capture_index) for r in records}
    class_names = sorted({s.label for s in sessions})
    class_index = {c: i for i, c in enumerate(class_names)}

    rows: list[PacketRecord] = []
    labels, tags, sess_idx, dirs = [], [], [], []
    owned = set()
    for si, sess in enumerate(sessions):
        for sp in sess.packets:
            key = (sp.record.source, sp.record.capture_index)
            if key not in retained:
                continue
            owned.add(key)
            rows.append(sp.record)
            labels.append(class_index[sess.label])
            tags.append(sess.dataset_tag)
            sess_idx.append(si)
            dirs.append(0 if sp.direction == FORWARD else 1)
    excluded = len(retained - owned)

    observed = sorted({k for r in rows for k in r.fields})
    n = len(rows)
    cells: dict[str, list] = {name: [None] * n for name in observed}
    for i, r in enumerate(rows):
        for k, v in r.fields.items():
            cells[k][i] = v
    codebooks: dict[str, Codebook] = {}
    values: dict[str, np.ndarray] = {}
    valid: dict[str, np.ndarray] = {}
    used_schemas: dict[str, FieldSchema] = {}
    for name in observed:
        raws = cells.pop(name)
        schema = schemas.get(name) or FieldSchema(name, infer_kind(name, [v for v in raws if v is not None][:2000]))
        used_schemas[name] = schema
        if schema.kind == DOMAIN_NAME:
            book = domain_dict
        elif schema.kind == OPAQUE:
            book = codebooks.setdefault(name, Codebook())
        else:
            book = None
        col, mask = encode_column(raws, schema, book)
        values[name] = col
        valid[name] = mask

    kinds = Counter(s.kind for s in used_schemas.values())
    log.info("feature matrix %d x %d; kinds %s", n, len(observed), dict(sorted(kinds.items())))
    return FeatureMatrix(
        columns=observed,
        values=values,
        valid=valid,
        labels=np.array(labels, dtype=np.int64),
        class_names=class_names,
        dataset_tags=np.array(tags, dtype=object),
        session_index=np.array(sess_idx, dtype=np.int64),
        directions=np.array(dirs, dtype=np.int8),
        schemas=used_schemas,
        session_ids=[s.session_id for s in sessions],
        domain_dict=domain_dict,
        excluded_packets=excluded,
    )

"""Shortcut categories for ranked fields: built-in rules plus a reviewed override file."""

from __future__ import annotations

import csv
import fnmatch
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import AssignmentError
from .ranker import AmiReport

log = logging.getLogger(__name__)

DATA_LEAKAGE = "DataLeakage"
RELATIVE_ARTIFACT = "RelativeArtifact"
TASK_AGNOSTIC = "TaskAgnostic"
BENIGN = "Benign"
CATEGORIES = (DATA_LEAKAGE, RELATIVE_ARTIFACT, TASK_AGNOSTIC, BENIGN)

RULE = "rule"
HUMAN = "human"

# order matters only for readability; patterns never overlap
RULES: tuple[tuple[str, str], ...] = (
    ("ip.src", DATA_LEAKAGE),
    ("ip.dst", DATA_LEAKAGE),
    ("ip.addr", DATA_LEAKAGE),
    ("ip.src_host", DATA_LEAKAGE),
    ("ip.dst_host", DATA_LEAKAGE),
    ("tcp.srcport", DATA_LEAKAGE),
    ("tcp.dstport", DATA_LEAKAGE),
    ("tcp.port", DATA_LEAKAGE),
    ("udp.srcport", DATA_LEAKAGE),
    ("udp.dstport", DATA_LEAKAGE),
    ("udp.port", DATA_LEAKAGE),
    ("tls.handshake.extensions_server_name", DATA_LEAKAGE),
    ("ssl.handshake.extensions_server_name", DATA_LEAKAGE),
    ("tcp.seq", RELATIVE_ARTIFACT),
    ("tcp.seq_raw", RELATIVE_ARTIFACT),
    ("tcp.nxtseq", RELATIVE_ARTIFACT),
    ("tcp.ack", RELATIVE_ARTIFACT),
    ("tcp.ack_raw", RELATIVE_ARTIFACT),
    ("tcp.options.timestamp.*", RELATIVE_ARTIFACT),
    ("tcp.window_size", TASK_AGNOSTIC),
    ("tcp.window_size_value", TASK_AGNOSTIC),
    ("ip.checksum", TASK_AGNOSTIC),
    ("tcp.checksum", TASK_AGNOSTIC),
    ("udp.checksum", TASK_AGNOSTIC),
    ("ip.ttl", TASK_AGNOSTIC),
)


def rule_category(name: str) -> str | None:
    for pattern, category in RULES:
        if fnmatch.fnmatchcase(name, pattern):
            return category
    return None


@dataclass
class FieldCategory:
    field: str
    category: str
    provenance: str
    needs_review: bool = False


@dataclass
class CategoryAssignment:
    entries: dict[str, FieldCategory] = field(default_factory=dict)

    def __getitem__(self, name: str) -> FieldCategory:
        return self.entries[name]

    def category(self, name: str) -> str:
        return self.entries[name].category


def suggest_categories(report: AmiReport, candidates_only: bool = False) -> CategoryAssignment:
    """Rule-based categories; fields no rule covers become Benign pending review."""
    out = CategoryAssignment()
    entries = report.candidates if candidates_only else report.entries
    for e in entries:
        cat = rule_category(e.field)
        if cat is None:
            out.entries[e.field] = FieldCategory(e.field, BENIGN, RULE, needs_review=True)
        else:
            out.entries[e.field] = FieldCategory(e.field, cat, RULE)
    return out


def read_assignment_file(path: str | Path) -> list[tuple[int, str, str]]:
    """Parse a ``field,category`` CSV into ``(line_number, field, category)`` rows."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = None
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
                continue
            if header is None:
                header = [c.strip().lower() for c in row]
                if header[:2] != ["field", "category"]:
                    raise AssignmentError(f"{path}:{lineno}: header must be 'field,category'")
                continue
            if len(row) < 2:
                raise AssignmentError(f"{path}:{lineno}: expected 'field,category', got {row!r}")
            name, cat = row[0].strip(), row[1].strip()
            if cat not in CATEGORIES:
                raise AssignmentError(
                    f"{path}:{lineno}: unknown category {cat!r} for field {name!r}; "
                    f"expected one of {', '.join(CATEGORIES)}"
                )
            rows.append((lineno, name, cat))
    return rows


@dataclass
class CategorizedReport:
    fields: list[dict]
    needs_review: list[str]
    warnings: list[str] = field(default_factory=list)

    def by_field(self) -> dict[str, dict]:
        return {f["field"]: f for f in self.fields}

    def fields_in(self, category: str, candidates_only: bool = True) -> list[str]:
        return [f["field"] for f in self.fields
                if f["category"] == category and (f["candidate"] or not candidates_only)]

    def to_dict(self) -> dict:
        return {"fields": self.fields, "needs_review": self.needs_review, "warnings": self.warnings}

    @classmethod
    def from_dict(cls, d: dict) -> "CategorizedReport":
        return cls(d["fields"], d["needs_review"], d.get("warnings", []))

    def write_json(self, path: str | Path, extra: dict | None = None) -> None:
        payload = {**(extra or {}), **self.to_dict()}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def apply_assignment(report: AmiReport, path: str | Path | None = None) -> CategorizedReport:
    """Merge rule suggestions with a reviewed ``field,category`` table (human wins)."""
    assignment = suggest_categories(report)
    warnings: list[str] = []
    if path is not None:
        for lineno, name, cat in read_assignment_file(path):
            if name not in assignment.entries:
                msg = f"{path}:{lineno}: field {name!r} is not in the report; ignored"
                log.warning(msg)
                warnings.append(msg)
                continue
            assignment.entries[name] = FieldCategory(name, cat, HUMAN)

    fields = []
    for e in report.entries:
        fc = assignment.entries[e.field]
        fields.append({
            "field": e.field,
            "rank": e.rank,
            "ami": e.ami,
            "candidate": e.candidate,
            **{k: v for k, v in asdict(fc).items() if k != "field"},
        })
    review = [f["field"] for f in fields if f["candidate"] and f["needs_review"]]
    if review:
        log.warning("candidates needing review: %s", ", ".join(review))
    return CategorizedReport(fields, review, warnings)

"""Category-specific checks on shortcut candidates.

Relative artifacts: compare AMI of a field's absolute values with AMI of a
within-session relative version.  Task-agnostic fields: average, over shared
classes, the KL divergence between kernel density estimates of the field in
two datasets.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encode import FeatureMatrix
from .errors import DomainError
from .ranker import DEFAULT_MAX_BINS, ami_components, field_codes

log = logging.getLogger(__name__)

ADJACENT_DIFF = "adjacent_diff"
ANCHOR_FIRST = "anchor_first"
TSVAL_MINUS_TSECR = "tsval_minus_tsecr"
TRANSFORMS = (ADJACENT_DIFF, ANCHOR_FIRST, TSVAL_MINUS_TSECR)

KL_FLOOR = 1e-10
GRID_POINTS = 512
GRID_PAD_BANDWIDTHS = 3.0
MIN_CLASS_SAMPLES = 30

# fields living in a 32-bit wrapping number space
WRAP32_FIELDS = frozenset({
    "tcp.seq", "tcp.seq_raw", "tcp.ack", "tcp.ack_raw", "tcp.nxtseq",
    "tcp.options.timestamp.tsval", "tcp.options.timestamp.tsecr",
})
PARTNER_FIELDS = {
    "tcp.options.timestamp.tsval": "tcp.options.timestamp.tsecr",
    "tcp.options.timestamp.tsecr": "tcp.options.timestamp.tsval",
}


def _wrap(d, modulus: int | None):
    if modulus is None:
        return d
    half = modulus // 2
    return (d + half) % modulus - half


def relative_transform_values(
    sessions: Sequence[Sequence[float | int | None]],
    kind: str = ADJACENT_DIFF,
    partner: Sequence[Sequence[float | int | None]] | None = None,
    modulus: int | None = None,
) -> list[list]:
    """Relative version of per-session, time-ordered values.

    ``None`` marks an invalid value and propagates to every output that uses
    it.  ``partner`` supplies the subtrahend for ``tsval_minus_tsecr``.  With
    ``modulus`` the differences are reduced to the signed range of that
    number space.
    """
    if kind not in TRANSFORMS:
        raise DomainError(f"unknown relative transform {kind!r}; expected one of {TRANSFORMS}")
    out = []
    if kind == TSVAL_MINUS_TSECR:
        if partner is None or len(partner) != len(sessions):
            raise DomainError("tsval_minus_tsecr needs a partner value list per session")
        for vals, subs in zip(sessions, partner):
            if len(vals) != len(subs):
                raise DomainError("partner session lengths differ")
            out.append([None if v is None or s is None else _wrap(v - s, modulus) for v, s in zip(vals, subs)])
        return out
    for vals in sessions:
        if not len(vals):
            out.append([])
            continue
        res = [0 if vals[0] is not None else None]
        for i in range(1, len(vals)):
            ref = vals[i - 1] if kind == ADJACENT_DIFF else vals[0]
            v = vals[i]
            res.append(None if v is None or ref is None else _wrap(v - ref, modulus))
        out.append(res)
    return out


def relative_column(
    matrix: FeatureMatrix,
    name: str,
    kind: str = ADJACENT_DIFF,
    partner: str | None = None,
    modulus: int | None = None,
    per_direction: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply a relative transform to one matrix column, grouping rows by session.

    Rows keep their order inside each group; with ``per_direction`` the two
    directions of a session are separate groups, since each side keeps its
    own sequence and timestamp counters.
    """
    if name not in matrix.values:
        raise DomainError(f"field {name!r} not in feature matrix")
    values, valid = matrix.column(name)
    pvalues = pvalid = None
    if kind == TSVAL_MINUS_TSECR:
        partner = partner or PARTNER_FIELDS.get(name)
        if partner is None or partner not in matrix.values:
            raise DomainError(f"tsval_minus_tsecr on {name!r} needs a partner field present in the matrix")
        pvalues, pvalid = matrix.column(partner)
    if per_direction:
        group = matrix.session_index.astype(np.int64) * 2 + matrix.directions.astype(np.int64)
    else:
        group = matrix.session_index.astype(np.int64)
    order = np.argsort(group, kind="stable")
    bounds = np.flatnonzero(np.diff(group[order])) + 1
    segments = np.split(order, bounds)

    def as_list(vals, ok, rows):
        return [v if o else None for v, o in zip(vals[rows].tolist(), ok[rows].tolist())]

    sess = [as_list(values, valid, rows) for rows in segments]
    part = [as_list(pvalues, pvalid, rows) for rows in segments] if pvalues is not None else None
    transformed = relative_transform_values(sess, kind, part, modulus)

    float_out = values.dtype.kind == "f"
    out = np.zeros(values.shape[0], dtype=np.float64 if float_out else np.int64)
    ok = np.zeros(values.shape[0], dtype=bool)
    for rows, vals in zip(segments, transformed):
        for r, v in zip(rows.tolist(), vals):
            if v is not None:
                out[r] = v
                ok[r] = True
    return out, ok


@dataclass
class DeltaAmiRecord:
    field: str
    kind: str
    ami_absolute: float
    ami_relative: float
    delta_ami: float
    n_valid_absolute: int
    n_valid_relative: int


def delta_ami(
    matrix: FeatureMatrix,
    name: str,
    kind: str = ADJACENT_DIFF,
    partner: str | None = None,
    max_bins: int = DEFAULT_MAX_BINS,
    per_direction: bool = True,
    modulus: int | None | str = "auto",
) -> DeltaAmiRecord:
    """AMI lost when a field is replaced by its within-session relative version."""
    if name not in matrix.values:
        raise DomainError(f"field {name!r} not in feature matrix")
    if modulus == "auto":
        modulus = 2**32 if name in WRAP32_FIELDS else None
    values, valid = matrix.column(name)
    rel, rel_valid = relative_column(matrix, name, kind, partner, modulus, per_direction)
    abs_codes, _ = field_codes(values, valid, max_bins)
    rel_codes, _ = field_codes(rel, rel_valid, max_bins)
    a = ami_components(abs_codes, matrix.labels).ami
    r = ami_components(rel_codes, matrix.labels).ami
    return DeltaAmiRecord(name, kind, a, r, a - r, int(valid.sum()), int(rel_valid.sum()))


@dataclass
class KdeResult:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    degenerate: bool = False


def silverman_bandwidth(samples: np.ndarray) -> float:
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n < 2:
        return 0.0
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    return 0.9 * spread * n ** (-0.2)


def _normalise(grid: np.ndarray, density: np.ndarray) -> np.ndarray:
    area = float(np.trapezoid(density, grid))
    return density / area if area > 0 else density


def kde_density(samples, grid, bandwidth: float | None = None) -> KdeResult:
    """Gaussian KDE evaluated on ``grid`` and renormalised to unit trapezoid area.

    Zero-spread samples produce a spike at the grid point nearest the value
    and the result is flagged degenerate.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    g = np.asarray(grid, dtype=np.float64).ravel()
    if x.size == 0:
        raise DomainError("kernel density needs at least one sample")
    if g.size < 2 or np.any(np.diff(g) <= 0):
        raise DomainError("grid must be strictly increasing with at least 2 points")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if x.size < 2 or float(np.ptp(x)) == 0.0 or h <= 0:
        dens = np.zeros_like(g)
        j = int(np.argmin(np.abs(g - x[0])))
        dens[j] = 1.0
        return KdeResult(g, _normalise(g, dens), 0.0, degenerate=True)

    # collapse duplicates; traffic fields are mostly integer valued
    uniq, counts = np.unique(x, return_counts=True)
    w = counts.astype(np.float64)
    dens = np.zeros_like(g)
    chunk = max(1, 2_000_000 // g.size)
    for s in range(0, uniq.size, chunk):
        z = (g[:, None] - uniq[None, s:s + chunk]) / h
        dens += np.exp(-0.5 * z * z) @ w[s:s + chunk]
    dens /= x.size * h * math.sqrt(2 * math.pi)
    return KdeResult(g, _normalise(g, dens), h)


def kl_divergence(p, q, grid) -> float:
    """Trapezoid-rule KL(p || q) on a shared grid, floored and clamped at zero."""
    g = np.asarray(grid, dtype=np.float64)
    if isinstance(p, KdeResult):
        if not np.array_equal(p.grid, g):
            raise DomainError("density p was evaluated on a different grid")
        p = p.density
    if isinstance(q, KdeResult):
        if not np.array_equal(q.grid, g):
            raise DomainError("density q was evaluated on a different grid")
        q = q.density
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if not (p.shape == q.shape == g.shape):
        raise DomainError(f"grid mismatch: p{p.shape} q{q.shape} grid{g.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise DomainError("densities must be non-negative")
    mask = p >= KL_FLOOR
    integrand = np.zeros_like(p)
    integrand[mask] = p[mask] * np.log(p[mask] / np.maximum(q[mask], KL_FLOOR))
    return max(0.0, float(np.trapezoid(integrand, g)))


@dataclass
class KlRecord:
    field: str
    kl_avg: float
    per_class_kl: dict[str, float]
    dataset_pair: tuple[str, str]
    skipped_classes: dict[str, str] = field(default_factory=dict)
    degenerate_classes: list[str] = field(default_factory=list)
    symmetric: bool = False
    curves: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("curves")
        d["dataset_pair"] = list(self.dataset_pair)
        return d


def _class_samples(matrix: FeatureMatrix, name: str) -> dict[str, np.ndarray]:
    values, valid = matrix.column(name)
    out = {}
    for ci, cname in enumerate(matrix.class_names):
        rows = (matrix.labels == ci) & valid
        out[cname] = values[rows].astype(np.float64)
    return out


def class_conditional_kl(
    name: str,
    matrix_a: FeatureMatrix,
    matrix_b: FeatureMatrix,
    *,
    dataset_pair: tuple[str, str] = ("D1", "D2"),
    min_samples: int = MIN_CLASS_SAMPLES,
    grid_points: int = GRID_POINTS,
    symmetric: bool = False,
    keep_curves: bool = False,
) -> KlRecord:
    """Mean over shared classes of KL(P_a(field | class) || P_b(field | class))."""
    for m in (matrix_a, matrix_b):
        if name not in m.values:
            raise DomainError(f"field {name!r} not in feature matrix")
    sa, sb = _class_samples(matrix_a, name), _class_samples(matrix_b, name)
    skipped: dict[str, str] = {}
    shared = []
    for c in sorted(set(sa) | set(sb)):
        if c not in sa or c not in sb:
            skipped[c] = "absent in one dataset"
        elif min(sa[c].size, sb[c].size) < min_samples:
            skipped[c] = f"fewer than {min_samples} valid samples"
        else:
            shared.append(c)
    for c, why in skipped.items():
        log.info("KL for %s: skipping class %s (%s)", name, c, why)
    if not shared:
        raise DomainError(f"no shared class with at least {min_samples} samples for field {name!r}")

    bws = {(c, s): silverman_bandwidth(arr) for c in shared for s, arr in (("a", sa[c]), ("b", sb[c]))}
    pooled = np.concatenate([sa[c] for c in shared] + [sb[c] for c in shared])
    pad = GRID_PAD_BANDWIDTHS * max(bws.values())
    lo, hi = float(pooled.min()) - pad, float(pooled.max()) + pad
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    grid = np.linspace(lo, hi, grid_points)

    per_class: dict[str, float] = {}
    degenerate: list[str] = []
    curves = {"grid": grid} if keep_curves else None
    for c in shared:
        pa = kde_density(sa[c], grid, bws[(c, "a")] or None)
        pb = kde_density(sb[c], grid, bws[(c, "b")] or None)
        if pa.degenerate or pb.degenerate:
            degenerate.append(c)
        kl = kl_divergence(pa, pb, grid)
        if symmetric:
            kl = 0.5 * (kl + kl_divergence(pb, pa, grid))
        per_class[c] = kl
        if curves is not None:
            curves[c] = (pa.density, pb.density)
    kl_avg = float(np.mean(list(per_class.values())))
    return KlRecord(name, kl_avg, per_class, tuple(dataset_pair), skipped, degenerate, symmetric, curves)


@dataclass
class ValidationReport:
    relative: list[DeltaAmiRecord] = field(default_factory=list)
    task_agnostic: list[KlRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "relative_artifact": [asdict(r) for r in self.relative],
            "task_agnostic": [r.to_dict() for r in self.task_agnostic],
            "notes": self.notes,
        }

    def write_json(self, path: str | Path, extra: dict | None = None) -> None:
        payload = {**(extra or {}), **self.to_dict()}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def write_density_csv(self, path: str | Path) -> int:
        """Long-format density curves: field,class,dataset,x,density."""
        rows = 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["field", "class", "dataset", "x", "density"])
            for rec in self.task_agnostic:
                if not rec.curves:
                    continue
                grid = rec.curves["grid"]
                for c, (pa, pb) in ((k, v) for k, v in rec.curves.items() if k != "grid"):
                    for tag, dens in zip(rec.dataset_pair, (pa, pb)):
                        for x, d in zip(grid.tolist(), dens.tolist()):
                            w.writerow([rec.field, c, tag, repr(x), repr(d)])
                            rows += 1
        return rows


def validate_candidates(
    matrix: FeatureMatrix,
    relative_fields: Sequence[str],
    agnostic_fields: Sequence[str],
    *,
    kind: str = ADJACENT_DIFF,
    dataset_pair: tuple[str, str] | None = None,
    min_samples: int = MIN_CLASS_SAMPLES,
    symmetric: bool = False,
    max_bins: int = DEFAULT_MAX_BINS,
    workers: int = 1,
) -> ValidationReport:
    """Run the matching validator for every categorised candidate."""
    report = ValidationReport()

    def rel_job(name: str) -> DeltaAmiRecord | str:
        k = kind
        if k == TSVAL_MINUS_TSECR and name not in PARTNER_FIELDS:
            k = ADJACENT_DIFF
        try:
            return delta_ami(matrix, name, k, max_bins=max_bins)
        except DomainError as exc:
            return f"{name}: {exc}"

    tags = sorted(set(matrix.dataset_tags.tolist()))
    pair = dataset_pair
    if pair is None and len(tags) >= 2:
        pair = (tags[0], tags[1])
    if agnostic_fields and pair is None:
        report.notes.append("KL validation skipped: a single dataset tag, need two")
    ma = mb = None
    if agnostic_fields and pair is not None:
        missing = [t for t in pair if t not in tags]
        if missing:
            raise DomainError(f"dataset tag(s) {missing} not present; have {tags}")
        ma, mb = matrix.for_tag(pair[0]), matrix.for_tag(pair[1])

    def kl_job(name: str) -> KlRecord | str:
        try:
            return class_conditional_kl(name, ma, mb, dataset_pair=pair, min_samples=min_samples,
                                        symmetric=symmetric, keep_curves=True)
        except DomainError as exc:
            return f"{name}: {exc}"

    agn = list(agnostic_fields) if ma is not None else []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rel_out = list(pool.map(rel_job, relative_fields))
        kl_out = list(pool.map(kl_job, agn))
    for r in rel_out:
        (report.notes.append(r) if isinstance(r, str) else report.relative.append(r))
    for r in kl_out:
        (report.notes.append(r) if isinstance(r, str) else report.task_agnostic.append(r))
    return report

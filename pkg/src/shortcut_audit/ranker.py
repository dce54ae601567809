"""Chance-adjusted dependence between packet fields and class labels.

All information quantities are in nats.  Expected mutual information uses the
permutation (hypergeometric) null model with both margins fixed.
"""

from __future__ import annotations

import csv
import fnmatch
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln

from .encode import FeatureMatrix
from .errors import DomainError

EPS = 1e-12
DEFAULT_MAX_BINS = 256
DEFAULT_MIN_ENTROPY = 0.05
DEFAULT_MIN_VALID_FRACTION = 0.01
DEFAULT_TOP_K = 10
DEFAULT_EMI_COST_BOUND = 10**8
DEFAULT_MC_PERMUTATIONS = 10_000
LN2 = math.log(2.0)


def entropy(counts: Sequence[int] | np.ndarray) -> float:
    c = np.asarray(counts, dtype=np.float64).ravel()
    if np.any(c < 0):
        raise DomainError("counts must be non-negative")
    n = c.sum()
    if n <= 0:
        raise DomainError("entropy of an all-zero count vector is undefined")
    p = c[c > 0] / n
    return float(-np.sum(p * np.log(p)))


@dataclass
class ContingencyTable:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or np.any(self.counts < 0):
            raise DomainError("contingency table must be a non-negative 2-D integer matrix")

    @property
    def row_margins(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_margins(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_codes(cls, x, y) -> "ContingencyTable":
        xc, yc = _codes(x), _codes(y)
        if xc.shape != yc.shape:
            raise DomainError("x and y must have equal length")
        r = int(xc.max()) + 1 if xc.size else 0
        c = int(yc.max()) + 1 if yc.size else 0
        counts = np.bincount(xc * c + yc, minlength=r * c).reshape(r, c) if r and c else np.zeros((r, c))
        return cls(counts)


def _codes(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.size == 0:
        return np.zeros(0, dtype=np.int64)
    _, inv = np.unique(arr, return_inverse=True)
    return inv.astype(np.int64).ravel()


def _mi_from_cells(cells: np.ndarray, row_of: np.ndarray, col_of: np.ndarray,
                   a: np.ndarray, b: np.ndarray, n: int) -> float:
    nij = cells.astype(np.float64)
    val = np.sum(nij / n * (np.log(nij) + math.log(n) - np.log(a[row_of]) - np.log(b[col_of])))
    return float(val)


def mutual_information(table: ContingencyTable) -> float:
    counts = table.counts
    n = table.total
    if n <= 0:
        raise DomainError("mutual information needs N > 0")
    rows, cols = np.nonzero(counts)
    return _mi_from_cells(counts[rows, cols], rows, cols,
                          table.row_margins.astype(np.float64), table.col_margins.astype(np.float64), n)


def emi_cost(row_margins, col_margins) -> int:
    """Number of hypergeometric terms the exact expected-MI sum evaluates."""
    a = np.asarray(row_margins, dtype=np.int64)
    b = np.asarray(col_margins, dtype=np.int64)
    return int(np.minimum.outer(a[a > 0], b[b > 0]).sum())


def expected_mi(
    row_margins: Sequence[int],
    col_margins: Sequence[int],
    n: int | None = None,
    *,
    cost_bound: int = DEFAULT_EMI_COST_BOUND,
    mc_permutations: int = DEFAULT_MC_PERMUTATIONS,
    seed: int = 0,
) -> float:
    """Expected MI over all label permutations with the given margins.

    Exact closed-form hypergeometric sum; falls back to a seeded Monte-Carlo
    estimate when the number of terms exceeds ``cost_bound``.
    """
    a = np.asarray(row_margins, dtype=np.int64)
    b = np.asarray(col_margins, dtype=np.int64)
    if np.any(a < 0) or np.any(b < 0):
        raise DomainError("margins must be non-negative")
    total_a, total_b = int(a.sum()), int(b.sum())
    if total_a != total_b or (n is not None and n != total_a):
        raise DomainError(f"inconsistent margins: sum(a)={total_a}, sum(b)={total_b}, N={n}")
    N = total_a
    if N <= 0:
        raise DomainError("expected MI needs N > 0")
    a, b = a[a > 0], b[b > 0]
    if a.size == 1 or b.size == 1:
        return 0.0
    if emi_cost(a, b) > cost_bound:
        return _expected_mi_monte_carlo(a, b, mc_permutations, seed)

    ua, wa = np.unique(a, return_counts=True)
    ub, wb = np.unique(b, return_counts=True)
    log_n = math.log(N)
    lg_n1 = gammaln(N + 1)
    total = 0.0
    for ai, wai in zip(ua.tolist(), wa.tolist()):
        base_a = gammaln(ai + 1) + gammaln(N - ai + 1) - lg_n1
        for bj, wbj in zip(ub.tolist(), wb.tolist()):
            lo, hi = max(1, ai + bj - N), min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            log_p = (base_a + gammaln(bj + 1) + gammaln(N - bj + 1)
                     - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                     - gammaln(N - ai - bj + nij + 1))
            mi_term = nij / N * (log_n + np.log(nij) - math.log(ai) - math.log(bj))
            total += wai * wbj * float(np.sum(mi_term * np.exp(log_p)))
    return total


def _expected_mi_monte_carlo(a: np.ndarray, b: np.ndarray, permutations: int, seed: int) -> float:
    x = np.repeat(np.arange(a.size), a)
    y = np.repeat(np.arange(b.size), b)
    rng = np.random.default_rng(seed)
    n = int(a.sum())
    af, bf = a.astype(np.float64), b.astype(np.float64)
    acc = 0.0
    for _ in range(permutations):
        yp = rng.permutation(y)
        cells = np.bincount(x * b.size + yp, minlength=a.size * b.size)
        nz = np.flatnonzero(cells)
        acc += _mi_from_cells(cells[nz], nz // b.size, nz % b.size, af, bf, n)
    return acc / permutations


@dataclass
class AmiComponents:
    mi: float
    expected_mi: float
    entropy_x: float
    entropy_y: float
    ami: float
    degenerate: bool = False


def ami_components(
    x, y, *, cost_bound: int = DEFAULT_EMI_COST_BOUND,
    mc_permutations: int = DEFAULT_MC_PERMUTATIONS, seed: int = 0,
) -> AmiComponents:
    """MI, expected MI, entropies and AMI with max-entropy normalisation."""
    xc, yc = _codes(x), _codes(y)
    if xc.shape != yc.shape:
        raise DomainError("x and y must have equal length")
    n = xc.size
    if n == 0:
        raise DomainError("adjusted MI needs at least one sample")
    a = np.bincount(xc)
    b = np.bincount(yc)
    hx, hy = entropy(a), entropy(b)
    if a.size == 1 or b.size == 1:
        return AmiComponents(0.0, 0.0, hx, hy, 0.0, degenerate=True)

    pair, cells = np.unique(xc * b.size + yc, return_counts=True)
    mi = _mi_from_cells(cells, pair // b.size, pair % b.size, a.astype(np.float64), b.astype(np.float64), n)
    emi = expected_mi(a, b, n, cost_bound=cost_bound, mc_permutations=mc_permutations, seed=seed)
    num = mi - emi
    den = max(hx, hy) - emi
    if abs(den) <= EPS:
        if abs(num) <= EPS:
            return AmiComponents(mi, emi, hx, hy, 1.0)
        den = math.copysign(EPS, den)
    return AmiComponents(mi, emi, hx, hy, num / den)


def adjusted_mi(x, y, **kwargs) -> float:
    return ami_components(x, y, **kwargs).ami


def discretize(values, max_bins: int = DEFAULT_MAX_BINS) -> np.ndarray:
    """Dense, order-preserving integer codes.

    Up to ``max_bins`` distinct values map one-to-one; beyond that, values are
    binned at empirical quantiles with duplicate edges merged.
    """
    v = np.asarray(values).ravel()
    if v.size == 0:
        return np.zeros(0, dtype=np.int64)
    uniq, inv = np.unique(v, return_inverse=True)
    if uniq.size <= max_bins:
        return inv.astype(np.int64)
    edges = np.unique(np.quantile(v.astype(np.float64), np.arange(1, max_bins) / max_bins))
    binned = np.searchsorted(edges, v.astype(np.float64), side="right")
    _, dense = np.unique(binned, return_inverse=True)
    return dense.astype(np.int64)


def field_codes(values: np.ndarray, valid: np.ndarray, max_bins: int = DEFAULT_MAX_BINS) -> tuple[np.ndarray, bool]:
    """Codes for one column with missing cells in their own trailing bin.

    Returns ``(codes, discretized)``; ``discretized`` is true when quantile
    binning kicked in.
    """
    codes = np.zeros(values.shape[0], dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    discretized = False
    if valid.any():
        vv = values[valid]
        discretized = np.unique(vv).size > max_bins
        codes[valid] = discretize(vv, max_bins)
        codes[~valid] = int(codes[valid].max()) + 1
    return codes, discretized


def load_denylist(path: str | Path | None = None) -> list[str]:
    if path is None:
        text = resources.files("shortcut_audit").joinpath("data/denylist.txt").read_text()
    else:
        text = Path(path).read_text()
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


@dataclass
class PrefilterResult:
    retained: list[str]
    excluded: dict[str, str]


def prefilter_fields(
    matrix: FeatureMatrix,
    denylist: Iterable[str] | None = None,
    min_entropy: float = DEFAULT_MIN_ENTROPY,
    min_valid_fraction: float = DEFAULT_MIN_VALID_FRACTION,
    max_bins: int = DEFAULT_MAX_BINS,
) -> PrefilterResult:
    """Drop denylisted, sparse, constant and near-constant columns (checked in that order)."""
    if matrix.n_samples == 0:
        raise DomainError("cannot prefilter an empty feature matrix")
    patterns = list(load_denylist() if denylist is None else denylist)
    retained, excluded = [], {}
    n = matrix.n_samples
    for name in matrix.columns:
        values, valid = matrix.column(name)
        if any(fnmatch.fnmatchcase(name, p) for p in patterns):
            excluded[name] = "denylist"
            continue
        if valid.sum() / n < min_valid_fraction:
            excluded[name] = "sparsity"
            continue
        codes, _ = field_codes(values, valid, max_bins)
        counts = np.bincount(codes)
        if np.count_nonzero(counts) <= 1:
            excluded[name] = "constant"
            continue
        if entropy(counts) < min_entropy:
            excluded[name] = "low_entropy"
            continue
        retained.append(name)
    return PrefilterResult(retained, excluded)


@dataclass
class AmiEntry:
    field: str
    entropy_feature: float
    entropy_label: float
    mi: float
    expected_mi: float
    ami: float
    n_valid: int
    discretized: bool
    clamped: bool = False
    degenerate: bool = False
    rank: int = 0
    candidate: bool = False

    @property
    def ami_reported(self) -> float:
        return min(max(self.ami, 0.0), 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ami_reported"] = self.ami_reported
        d["entropy_feature_bits"] = self.entropy_feature / LN2
        d["entropy_label_bits"] = self.entropy_label / LN2
        d["mi_bits"] = self.mi / LN2
        return d


@dataclass
class AmiReport:
    entries: list[AmiEntry]
    k: int
    n_samples: int
    n_classes: int
    excluded: dict[str, str] = field(default_factory=dict)

    @property
    def candidates(self) -> list[AmiEntry]:
        return [e for e in self.entries if e.candidate]

    def entry(self, name: str) -> AmiEntry:
        for e in self.entries:
            if e.field == name:
                return e
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_samples": self.n_samples,
            "n_classes": self.n_classes,
            "unit": "nats",
            "entries": [e.to_dict() for e in self.entries],
            "excluded": dict(sorted(self.excluded.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AmiReport":
        keep = set(AmiEntry.__dataclass_fields__)
        entries = [AmiEntry(**{k: v for k, v in e.items() if k in keep}) for e in d["entries"]]
        return cls(entries, d["k"], d["n_samples"], d["n_classes"], d.get("excluded", {}))

    def write_json(self, path: str | Path, extra: dict | None = None) -> None:
        payload = self.to_dict()
        if extra:
            payload = {**extra, **payload}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        cols = ["rank", "field", "ami", "ami_reported", "mi", "expected_mi", "entropy_feature",
                "entropy_label", "entropy_feature_bits", "n_valid", "discretized", "candidate"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for e in self.entries:
                d = e.to_dict()
                w.writerow([_cell(d[c]) for c in cols])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def score_field(
    matrix: FeatureMatrix, name: str, max_bins: int = DEFAULT_MAX_BINS,
    cost_bound: int = DEFAULT_EMI_COST_BOUND, seed: int = 0,
) -> AmiEntry:
    values, valid = matrix.column(name)
    codes, discretized = field_codes(values, valid, max_bins)
    comp = ami_components(codes, matrix.labels, cost_bound=cost_bound, seed=seed)
    return AmiEntry(
        field=name,
        entropy_feature=comp.entropy_x,
        entropy_label=comp.entropy_y,
        mi=comp.mi,
        expected_mi=comp.expected_mi,
        ami=comp.ami,
        n_valid=int(valid.sum()),
        discretized=bool(discretized),
        clamped=not (0.0 <= comp.ami <= 1.0),
        degenerate=comp.degenerate,
    )


def rank_top_k(
    matrix: FeatureMatrix,
    k: int = DEFAULT_TOP_K,
    *,
    fields: Sequence[str] | None = None,
    denylist: Iterable[str] | None = None,
    min_entropy: float = DEFAULT_MIN_ENTROPY,
    min_valid_fraction: float = DEFAULT_MIN_VALID_FRACTION,
    max_bins: int = DEFAULT_MAX_BINS,
    cost_bound: int = DEFAULT_EMI_COST_BOUND,
    seed: int = 0,
    workers: int = 1,
) -> AmiReport:
    """Score every retained field against the labels and mark the top ``k``.

    ``fields`` bypasses the prefilter when given.  Ties in AMI are broken by
    field name so the ranking is independent of ``workers``.
    """
    n_classes = int(np.unique(matrix.labels).size)
    if n_classes < 2:
        raise DomainError(f"ranking needs at least 2 classes, found {n_classes}")
    if fields is None:
        pre = prefilter_fields(matrix, denylist, min_entropy, min_valid_fraction, max_bins)
        names, excluded = pre.retained, pre.excluded
    else:
        names, excluded = list(fields), {}

    def job(name: str) -> AmiEntry:
        return score_field(matrix, name, max_bins, cost_bound, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(job, names))
    else:
        entries = [job(n) for n in names]
    entries.sort(key=lambda e: (-e.ami, e.field))
    for i, e in enumerate(entries):
        e.rank = i + 1
        e.candidate = i < k
    return AmiReport(entries, k, matrix.n_samples, n_classes, excluded)

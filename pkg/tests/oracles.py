"""Independent reference implementations used only by the tests.

Each oracle takes a different computational route from the production code so
agreement is meaningful.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from functools import lru_cache


def _mi_of_table(rows: list[tuple[int, ...]], a: tuple[int, ...], b: tuple[int, ...], n: int) -> float:
    terms = []
    for i, row in enumerate(rows):
        for j, nij in enumerate(row):
            if nij:
                terms.append(nij / n * math.log(n * nij / (a[i] * b[j])))
    return math.fsum(terms)


def plain_entropy(labels) -> float:
    n = len(labels)
    return -math.fsum(c / n * math.log(c / n) for c in Counter(labels).values())


def plain_mi(x, y) -> float:
    n = len(x)
    joint = Counter(zip(x, y))
    cx, cy = Counter(x), Counter(y)
    return math.fsum(c / n * math.log(n * c / (cx[u] * cy[v])) for (u, v), c in joint.items())


def _compositions(total: int, caps: tuple[int, ...]):
    """All vectors v with sum(v) == total and 0 <= v[k] <= caps[k]."""
    if not caps:
        if total == 0:
            yield ()
        return
    rest_cap = sum(caps[1:])
    for first in range(max(0, total - rest_cap), min(total, caps[0]) + 1):
        for tail in _compositions(total - first, caps[1:]):
            yield (first,) + tail


def emi_by_table_enumeration(a: tuple[int, ...], b: tuple[int, ...]) -> float:
    """Exact expected MI by enumerating every table with the given margins.

    Each table is weighted by the exact integer number of label permutations
    producing it: prod_i a_i! / prod_ij n_ij!  out of  N! / prod_j b_j!.
    Row-by-row recursion memoised on the remaining column sums.
    """
    a = tuple(x for x in a if x > 0)
    b = tuple(x for x in b if x > 0)
    n = sum(a)

    @lru_cache(maxsize=None)
    def walk(i: int, remaining: tuple[int, ...]) -> tuple[int, float]:
        # returns (number of arrangements of rows i.., sum over them of count * partial MI)
        if i == len(a):
            return (1, 0.0) if not any(remaining) else (0, 0.0)
        count_total, weighted = 0, 0.0
        for row in _compositions(a[i], remaining):
            ways =math.factorial(a[i]) // math.prod(math.factorial(v) for v in row)
            part = math.fsum(v / n * math.log(n * v / (a[i] * b[j])) for j, v in enumerate(row) if v)
            sub_count, sub_weighted = walk(i + 1, tuple(r - v for r, v in zip(remaining, row)))
            if sub_count:
                count_total += ways * sub_count
                weighted += ways * (sub_count * part + sub_weighted)
        return count_total, weighted

    total_count, weighted = walk(0, b)
    expected_total = math.factorial(n) // math.prod(math.factorial(x) for x in b)
    assert total_count == expected_total, (total_count, expected_total)
    return weighted / total_count


def emi_by_permutation(x, y) -> float:
    """Literal average of MI over every distinct rearrangement of ``y``.  Small N only."""
    perms = set(itertools.permutations(y))
    return math.fsum(plain_mi(x, p) for p in perms) / len(perms)


def ami_oracle(x, y, eps: float = 1e-12) -> tuple[float, float, float]:
    """(mi, emi, ami) with max-entropy normalisation via the table-enumeration route."""
    if len(set(x)) == 1 or len(set(y)) == 1:
        return 0.0, 0.0, 0.0
    mi = plain_mi(x, y)
    a = tuple(Counter(x).values())
    b = tuple(Counter(y).values())
    emi = emi_by_table_enumeration(a, b)
    num = mi - emi
    den = max(plain_entropy(x), plain_entropy(y)) - emi
    if abs(den) <= eps:
        if abs(num) <= eps:
            return mi, emi, 1.0
        den = math.copysign(eps, den)
    return mi, emi, num / den


def rfc1071_checksum(data: bytes) -> int:
    """Byte-loop ones-complement checksum, straight from the RFC 1071 description."""
    if len(data) % 2:
        data = data + b"\x00"
    total = 0
    for i in range(0, len(data), 2):
        total += (data[i] << 8) | data[i + 1]
        while total > 0xFFFF:
            total = (total & 0xFFFF) + (total >> 16)
    return (~total) & 0xFFFF

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ami_oracle, emi_by_permutation, emi_by_table_enumeration, plain_entropy, plain_mi
from shortcut_audit.encode import FeatureMatrix
from shortcut_audit.errors import DomainError
from shortcut_audit.ranker import (
    AmiReport,
    ContingencyTable,
    adjusted_mi,
    ami_components,
    discretize,
    entropy,
    expected_mi,
    field_codes,
    load_denylist,
    mutual_information,
    prefilter_fields,
    rank_top_k,
)

# frozen from the direct-summation oracle in tests/oracles.py
ENTROPY_123 = 1.0114042647073518
MI_2112 = 0.056633012265132426
EMI_22_22 = 0.23104906018664842


def test_entropy_examples():
    assert entropy([5, 5]) == pytest.approx(math.log(2), abs=1e-12)
    assert entropy([7]) == 0.0
    assert entropy([1, 2, 3]) == pytest.approx(ENTROPY_123, abs=1e-12)
    assert entropy([0, 3, 0, 3]) == pytest.approx(math.log(2), abs=1e-12)


def test_entropy_rejects_empty_and_negative():
    with pytest.raises(DomainError):
        entropy([0, 0])
    with pytest.raises(DomainError):
        entropy([1, -1])


def test_mutual_information_examples():
    assert mutual_information(ContingencyTable([[5, 0], [0, 5]])) == pytest.approx(math.log(2), abs=1e-12)
    assert mutual_information(ContingencyTable([[4, 4], [4, 4]])) == pytest.approx(0.0, abs=1e-12)
    assert mutual_information(ContingencyTable([[2, 1], [1, 2]])) == pytest.approx(MI_2112, abs=1e-12)


def test_contingency_margins():
    t = ContingencyTable.from_codes([0, 0, 1, 2, 2, 2], [1, 0, 1, 1, 0, 0])
    assert t.counts.tolist() == [[1, 1], [0, 1], [2, 1]]
    assert t.row_margins.tolist() == [2, 1, 3]
    assert t.col_margins.tolist() == [3, 3]
    assert t.total == 6


def test_expected_mi_examples():
    assert expected_mi([8], [3, 5], 8) == 0.0
    assert expected_mi([1, 1], [1, 1], 2) == pytest.approx(math.log(2), abs=1e-12)
    assert expected_mi([2, 2], [2, 2], 4) == pytest.approx(EMI_22_22, abs=1e-12)


def test_expected_mi_inconsistent_margins():
    with pytest.raises(DomainError):
        expected_mi([2, 2], [1, 2], 4)
    with pytest.raises(DomainError):
        expected_mi([2, 2], [2, 2], 5)


def test_expected_mi_matches_literal_permutations_small_n():
    rng = np.random.default_rng(3)
    for _ in range(40):
        n = int(rng.integers(2, 9))
        x = rng.integers(0, 3, n).tolist()
        y = rng.integers(0, 3, n).tolist()
        a, b = list(Counter(x).values()), list(Counter(y).values())
        assert expected_mi(a, b, n) == pytest.approx(emi_by_permutation(x, y), abs=1e-12)


def test_table_oracle_matches_literal_permutations():
    # cross-check the two oracle routes against each other
    for x, y in [([0, 0, 1, 1, 2], [0, 1, 1, 1, 0]), ([0, 1, 1, 2, 2, 2, 3], [0, 0, 1, 1, 1, 2, 2])]:
        a = tuple(Counter(x).values())
        b = tuple(Counter(y).values())
        assert emi_by_table_enumeration(a, b) == pytest.approx(emi_by_permutation(x, y), abs=1e-12)


def test_monte_carlo_fallback_close_to_exact():
    a, b = [30, 20, 10], [25, 35]
    exact = expected_mi(a, b)
    mc = expected_mi(a, b, cost_bound=0, mc_permutations=4000, seed=1)
    assert mc == pytest.approx(exact, rel=0.05)
    assert mc == expected_mi(a, b, cost_bound=0, mc_permutations=4000, seed=1)


def test_adjusted_mi_examples():
    y = np.repeat(np.arange(4), 10)
    assert adjusted_mi(y, y) == pytest.approx(1.0, abs=1e-12)
    comp = ami_components(np.zeros(40, dtype=int), y)
    assert comp.ami == 0.0 and comp.degenerate


def test_adjusted_mi_chance_level():
    scores = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.integers(0, 2, 100)
        y = rng.permutation(np.repeat([0, 1], 50))
        scores.append(adjusted_mi(x, y))
    assert abs(float(np.mean(scores))) <= 0.05


def test_adjusted_mi_saturated_tiny_table():
    # x == y with two singletons: mi == emi == H, so the 0/0 guard returns 1
    assert adjusted_mi([0, 1], [0, 1]) == 1.0


def test_oracle_equivalence_sampled_tables():
    rng = np.random.default_rng(11)
    for _ in range(300):
        n = int(rng.integers(1, 17))
        x = rng.integers(0, int(rng.integers(1, 5)), n).tolist()
        y = rng.integers(0, int(rng.integers(1, 5)), n).tolist()
        mi, emi, ami = ami_oracle(x, y)
        comp = ami_components(x, y)
        assert comp.mi == pytest.approx(mi, abs=1e-9)
        assert comp.expected_mi == pytest.approx(emi, abs=1e-9)
        assert comp.ami == pytest.approx(ami, abs=1e-9)


codes = st.lists(st.integers(0, 4), min_size=2, max_size=40)


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_ami_properties(data):
    x = data.draw(codes)
    y = data.draw(st.lists(st.integers(0, 3), min_size=len(x), max_size=len(x)))
    a = adjusted_mi(x, y)
    assert a == pytest.approx(adjusted_mi(y, x), abs=1e-12)
    assert a <= 1 + 1e-12
    # relabel classes with a permutation of code identities
    perm = data.draw(st.permutations(range(4)))
    assert adjusted_mi(x, [perm[v] for v in y]) == pytest.approx(a, abs=1e-12)
    assert mutual_information(ContingencyTable.from_codes(x, y)) >= -1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=6))
def test_entropy_matches_direct_sum(counts):
    labels = [i for i, c in enumerate(counts) for _ in range(c)]
    assert entropy(counts) == pytest.approx(plain_entropy(labels), abs=1e-12)


def test_mi_matches_direct_sum():
    rng = np.random.default_rng(0)
    x, y = rng.integers(0, 5, 200), rng.integers(0, 3, 200)
    got = mutual_information(ContingencyTable.from_codes(x, y))
    assert got == pytest.approx(plain_mi(x.tolist(), y.tolist()), abs=1e-12)


def test_discretize_identity_codebook():
    assert discretize([9, 1, 5, 1]).tolist() == [2, 0, 1, 0]
    assert discretize([3.5] * 10).tolist() == [0] * 10


def test_discretize_quantile_bins_balanced():
    v = np.random.default_rng(5).random(10_000)
    c = discretize(v)
    counts = np.bincount(c)
    assert counts.size == 256
    expected = 10_000 / 256
    assert np.all(np.abs(counts - expected) <= 0.2 * expected)
    # order preserving
    order = np.argsort(v)
    assert np.all(np.diff(c[order]) >= 0)


def test_discretize_merges_duplicate_edges():
    v = np.concatenate([np.zeros(5000), np.arange(1000, dtype=float)])
    c = discretize(v)
    assert np.unique(c).size < 256
    assert np.unique(c[:5000]).size == 1


def test_field_codes_missing_bin():
    values = np.array([7, 7, -1, 9])
    valid = np.array([True, True, False, True])
    codes, disc = field_codes(values, valid)
    assert codes.tolist() == [0, 0, 2, 1]
    assert not disc


def _matrix(columns, labels, valid=None):
    return FeatureMatrix.from_columns(columns, labels, valid)


def test_prefilter_reasons():
    n = 1000
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, n)
    sparse_valid = np.zeros(n, dtype=bool)
    sparse_valid[:2] = True
    low = np.zeros(n, dtype=int)
    low[0] = 1
    m = _matrix(
        {"const": np.full(n, 4), "frame.number": np.arange(n), "sparse": rng.integers(0, 9, n),
         "good": rng.integers(0, 9, n), "low": low, "tcp.stream": rng.integers(0, 9, n)},
        labels.tolist(), {"sparse": sparse_valid},
    )
    res = prefilter_fields(m)
    assert res.excluded == {"const": "constant", "frame.number": "denylist", "sparse": "sparsity",
                            "low": "low_entropy", "tcp.stream": "denylist"}
    assert res.retained == ["good"]


def test_denylist_ships_core_entries():
    deny = load_denylist()
    for name in ("frame.number", "tcp.stream", "udp.stream", "eth.padding"):
        assert name in deny


def test_denylist_custom_file(tmp_path):
    p = tmp_path / "deny.txt"
    p.write_text("# comment\nfoo.*\n\nbar\n")
    assert load_denylist(p) == ["foo.*", "bar"]


def test_rank_top_k_bijection_and_default_k():
    rng = np.random.default_rng(2)
    n = 600
    labels = rng.integers(0, 3, n)
    cols = {f"noise{i:02d}": rng.integers(0, 6, n) for i in range(12)}
    cols["leak"] = labels * 7 + 100
    report = rank_top_k(_matrix(cols, labels.tolist()))
    assert report.entries[0].field == "leak"
    assert report.entries[0].ami == pytest.approx(1.0, abs=1e-12)
    assert len(report.candidates) == 10
    assert [e.rank for e in report.entries] == list(range(1, 14))


def test_rank_ties_broken_by_name():
    labels = [0, 1] * 50
    cols = {"zeta": np.array(labels) + 3, "alpha": np.array(labels) * 2}
    report = rank_top_k(_matrix(cols, labels), fields=["zeta", "alpha"])
    assert [e.field for e in report.entries] == ["alpha", "zeta"]


def test_rank_requires_two_classes():
    with pytest.raises(DomainError):
        rank_top_k(_matrix({"a": np.arange(10)}, [0] * 10))


def test_rank_worker_invariance_and_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    n = 400
    labels = rng.integers(0, 4, n)
    cols = {f"f{i}": (labels * (i % 3) + rng.integers(0, 3, n)) for i in range(9)}
    m = _matrix(cols, labels.tolist())
    one = rank_top_k(m, workers=1).to_dict()
    four = rank_top_k(m, workers=4).to_dict()
    assert one == four
    r = rank_top_k(m, k=3)
    r.write_json(tmp_path / "r.json")
    r.write_csv(tmp_path / "r.csv")
    import json
    back = AmiReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert back.to_dict() == r.to_dict()
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("rank,field,ami")
    assert len(lines) == 10


def test_reported_ami_clamped_flag():
    # anti-correlated tiny sample gives a negative AMI
    labels = [0, 0, 1, 1]
    x = np.array([0, 1, 0, 1])
    rep = rank_top_k(_matrix({"x": x}, labels), fields=["x"])
    e = rep.entries[0]
    assert e.ami < 0
    assert e.clamped and e.ami_reported == 0.0

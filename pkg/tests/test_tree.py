from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shortcut_audit.errors import DomainError
from shortcut_audit.tree import TreeParams, train_decision_tree


def gini_children(X, y, f, t, n_classes):
    """Weighted child impurity computed the slow way, for cross-checking splits."""
    total = 0.0
    for mask in (X[:, f] <= t, X[:, f] > t):
        n = mask.sum()
        if n == 0:
            return None
        p = np.bincount(y[mask], minlength=n_classes) / n
        total += n * (1 - (p * p).sum())
    return total


def test_separable_single_feature():
    X = np.array([[0, 9], [1, 9], [2, 9], [200, 9], [201, 9], [250, 9]], dtype=np.uint8)
    y = np.array([0, 0, 0, 1, 1, 1])
    tree = train_decision_tree(X, y, TreeParams(min_samples_leaf=1))
    assert tree.node_count == 3
    assert tree.feature[0] == 0 and tree.threshold[0] == 2
    assert tree.predict(X).tolist() == y.tolist()


def test_pure_node_is_leaf():
    X = np.random.default_rng(0).integers(0, 256, (20, 4)).astype(np.uint8)
    tree = train_decision_tree(X, np.zeros(20, dtype=int))
    assert tree.node_count == 1 and tree.max_depth == 0


def test_xor_needs_zero_gain_split():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.uint8)
    y = np.array([0, 1, 1, 0])
    tree = train_decision_tree(X, y, TreeParams(min_samples_leaf=1))
    assert tree.predict(X).tolist() == y.tolist()


def test_root_split_matches_exhaustive_search():
    rng = np.random.default_rng(3)
    X = rng.integers(0, 8, (40, 3)).astype(np.uint8)
    y = rng.integers(0, 3, 40)
    tree = train_decision_tree(X, y, TreeParams(max_depth=1, min_samples_leaf=1))
    best = None
    for f, t in itertools.product(range(3), range(255)):
        score = gini_children(X, y, f, t, 3)
        if score is not None and (best is None or score < best[0] - 1e-12):
            best = (score, f, t)
    assert (tree.feature[0], tree.threshold[0]) == best[1:]


def test_depth_cap_at_predict_equals_depth_limited_training():
    rng = np.random.default_rng(5)
    X = rng.integers(0, 256, (300, 6)).astype(np.uint8)
    y = (X[:, 0] > 128).astype(int) + (X[:, 1] > 60).astype(int) + rng.integers(0, 2, 300)
    full = train_decision_tree(X, y, TreeParams(max_depth=None))
    for cap in (1, 2, 3, 5):
        capped = train_decision_tree(X, y, TreeParams(max_depth=cap))
        assert np.array_equal(full.predict(X, cap), capped.predict(X))


def test_min_samples_leaf_respected():
    rng = np.random.default_rng(1)
    X = rng.integers(0, 256, (100, 5)).astype(np.uint8)
    y = rng.integers(0, 2, 100)
    tree = train_decision_tree(X, y, TreeParams(max_depth=None, min_samples_leaf=7))
    leaves = tree.left < 0
    assert tree.counts[leaves].sum(axis=1).min() >= 7


def test_predict_dimension_mismatch_and_bad_input():
    tree = train_decision_tree(np.array([[0], [1]], dtype=np.uint8), np.array([0, 1]), TreeParams(min_samples_leaf=1))
    with pytest.raises(DomainError):
        tree.predict(np.zeros((2, 3), dtype=np.uint8))
    with pytest.raises(DomainError):
        train_decision_tree(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(DomainError):
        train_decision_tree(np.array([[300]]), np.array([0]))
    with pytest.raises(DomainError):
        TreeParams(min_samples_leaf=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_unbounded_tree_fits_distinct_rows(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 256, (30, 4)).astype(np.uint8)
    _, first = np.unique(X, axis=0, return_index=True)
    X, y = X[first], rng.integers(0, 3, first.size)
    tree = train_decision_tree(X, y, TreeParams(max_depth=None, min_samples_leaf=1))
    assert np.array_equal(tree.predict(X), y)

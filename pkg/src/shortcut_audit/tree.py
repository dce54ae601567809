"""CART decision tree with Gini impurity over byte-valued features.

Splits are of the form ``x[f] <= t`` with ``t`` in 0..254.  Among equally good
splits the lowest feature index wins, then the lowest threshold.  Every
internal node keeps its class counts, so a tree grown without a depth limit
can be evaluated at any shallower depth and gives exactly the tree that a
depth-limited grower would have produced.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError

N_VALUES = 256


@dataclass(frozen=True)
class TreeParams:
    max_depth: int | None = 20
    min_samples_leaf: int = 2

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 0:
            raise DomainError("max_depth must be non-negative")
        if self.min_samples_leaf < 1:
            raise DomainError("min_samples_leaf must be positive")

    def to_dict(self) -> dict:
        return {**asdict(self), "criterion": "gini", "tie_break": "lowest feature, then lowest threshold"}


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    depth: np.ndarray
    n_features: int
    n_classes: int

    @property
    def node_count(self) -> int:
        return int(self.feature.size)

    @property
    def max_depth(self) -> int:
        leaves = self.left < 0
        return int(self.depth[leaves].max()) if leaves.any() else 0

    def predict(self, X, max_depth: int | None = None) -> np.ndarray:
        """Majority class of the reached node; ties go to the lowest class code."""
        X = np.asarray(X)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DomainError(f"expected {self.n_features} features, got {X.shape[1]}")
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            internal = self.left[node] >= 0
            if max_depth is not None:
                internal &= self.depth[node] < max_depth
            if not internal.any():
                break
            r = rows[internal]
            n = node[internal]
            go_left = X[r, self.feature[n]] <= self.threshold[n]
            node[internal] = np.where(go_left, self.left[n], self.right[n])
        pred = np.argmax(self.counts[node], axis=1)
        return pred[0] if single else pred


def _best_split(Xn: np.ndarray, yn: np.ndarray, n_classes: int, min_leaf: int):
    """Return (feature column, threshold, child impurity) or None."""
    m, d = Xn.shape
    flat = (np.arange(d, dtype=np.int64)[None, :] * N_VALUES + Xn) * n_classes + yn[:, None]
    hist = np.bincount(flat.ravel(), minlength=d * N_VALUES * n_classes).reshape(d, N_VALUES, n_classes)
    left = np.cumsum(hist, axis=1)[:, :-1, :].astype(np.float64)
    total = hist[0].sum(axis=0).astype(np.float64)
    right = total[None, None, :] - left
    nl = left.sum(axis=2)
    nr = m - nl
    valid = (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        # weighted child Gini: sum over sides of n_side - sum_c count^2 / n_side
        score = (nl - (left * left).sum(axis=2) / nl) + (nr - (right * right).sum(axis=2) / nr)
    score = np.where(valid, score, np.inf)
    best = int(np.argmin(score))
    f, t = divmod(best, N_VALUES - 1)
    return f, t, float(score.flat[best])


def train_decision_tree(X, y, params: TreeParams = TreeParams(), n_classes: int | None = None) -> Tree:
    """Grow a CART tree on uint8 features ``X`` and integer labels ``y``.

    Zero-gain splits are taken while a node is impure, so patterns such as XOR
    that no single split improves are still separated.
    """
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DomainError("X must be 2-D with one row per label")
    if X.shape[0] == 0:
        raise DomainError("cannot train on zero samples")
    if X.min(initial=0) < 0 or X.max(initial=0) >= N_VALUES:
        raise DomainError("features must be byte values 0..255")
    X = X.astype(np.int64, copy=False)
    n, d = X.shape
    C = int(n_classes if n_classes is not None else y.max() + 1)
    # features constant over the training set can never split
    usable = np.flatnonzero(X.min(axis=0) != X.max(axis=0))
    Xu = X[:, usable]

    feature, threshold, left, right, counts, depth = [], [], [], [], [], []

    def new_node(idx: np.ndarray, dep: int) -> int:
        feature.append(-1)
        threshold.append(0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=C))
        depth.append(dep)
        return len(feature) - 1

    root = new_node(np.arange(n), 0)
    stack = [(root, np.arange(n))]
    min_leaf = params.min_samples_leaf
    while stack:
        node, idx = stack.pop()
        dep = depth[node]
        if params.max_depth is not None and dep >= params.max_depth:
            continue
        if np.count_nonzero(counts[node]) <= 1 or idx.size < 2 * min_leaf or usable.size == 0:
            continue
        found = _best_split(Xu[idx], y[idx], C, min_leaf)
        if found is None:
            continue
        f, t, _ = found
        go_left = Xu[idx, f] <= t
        li, ri = idx[go_left], idx[~go_left]
        feature[node] = int(usable[f])
        threshold[node] = int(t)
        left[node] = new_node(li, dep + 1)
        right[node] = new_node(ri, dep + 1)
        # depth first, left subtree before right
        stack.append((right[node], ri))
        stack.append((left[node], li))

    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.int64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        counts=np.array(counts, dtype=np.int64).reshape(len(feature), C),
        depth=np.array(depth, dtype=np.int64),
        n_features=d,
        n_classes=C,
    )

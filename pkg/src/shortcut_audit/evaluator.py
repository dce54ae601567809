"""Accuracy of a byte-level decision tree before and after occlusion.

Per repeat: sample flows per class, split them 8:1:1 with stratification,
occlude, train one tree on the training part, choose the depth cap on the
validation part and score the test part.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError
from .occlusion import OcclusionSpec, SessionTensor, occlude_all
from .tree import TreeParams, train_decision_tree

log = logging.getLogger(__name__)

DEPTH_GRID: tuple[int | None, ...] = (5, 10, 20, None)
PARTS = ("train", "val", "test")


@dataclass(frozen=True)
class EvalProtocol:
    max_flows_per_class: int = 500
    per_dataset: bool = False
    ratios: tuple[int, int, int] = (8, 1, 1)
    repeats: int = 3
    seed: int = 0
    min_flows_per_class: int = 10
    depth_grid: tuple[int | None, ...] = DEPTH_GRID

    def __post_init__(self):
        if self.max_flows_per_class < 1 or self.repeats < 1 or self.min_flows_per_class < 1:
            raise DomainError("protocol counts must be positive")
        if len(self.ratios) != 3 or min(self.ratios) < 0 or sum(self.ratios) <= 0:
            raise DomainError("ratios must be three non-negative integers with positive sum")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["depth_grid"] = [g for g in self.depth_grid]
        return d


def allocate(n: int, ratios: Sequence[int]) -> list[int]:
    """Split ``n`` into parts proportional to ``ratios`` by largest remainder."""
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    sizes = [int(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    audit: dict


def stratified_split(labels: np.ndarray, ids: Sequence[str], protocol: EvalProtocol, repeat: int) -> Split:
    """Sample and split flow indices for one repeat (deterministic in seed and repeat)."""
    rng = np.random.default_rng([protocol.seed, repeat])
    classes = np.unique(labels)
    pools = {int(c): np.flatnonzero(labels == c) for c in classes}
    if protocol.per_dataset:
        everything = np.concatenate([pools[c] for c in sorted(pools)])
        keep = np.sort(rng.permutation(everything)[: protocol.max_flows_per_class])
        pools = {c: np.intersect1d(p, keep) for c, p in pools.items()}
    parts: dict[str, list[np.ndarray]] = {p: [] for p in PARTS}
    per_class = {}
    for c in sorted(pools):
        idx = rng.permutation(pools[c])
        if not protocol.per_dataset:
            idx = idx[: protocol.max_flows_per_class]
        sizes = allocate(idx.size, protocol.ratios)
        bounds = np.cumsum([0] + sizes)
        chunks = [np.sort(idx[bounds[i]:bounds[i + 1]]) for i in range(3)]
        for p, chunk in zip(PARTS, chunks):
            parts[p].append(chunk)
        per_class[int(c)] = {
            "available": int(np.sum(labels == c)),
            "sampled": int(idx.size),
            **{p: int(ch.size) for p, ch in zip(PARTS, chunks)},
            **{f"{p}_ids": [ids[i] for i in ch.tolist()] for p, ch in zip(PARTS, chunks)},
        }
    arrays = {p: np.concatenate(v) if v else np.zeros(0, dtype=np.int64) for p, v in parts.items()}
    audit = {
        "repeat": repeat,
        "per_class": per_class,
        "totals": {p: int(a.size) for p, a in arrays.items()},
        "digest": hashlib.sha256(json.dumps(per_class, sort_keys=True).encode()).hexdigest(),
    }
    return Split(arrays["train"], arrays["val"], arrays["test"], audit)


@dataclass
class StrategyResult:
    name: str
    spec: dict | None
    accuracies: list[float]
    chosen_depths: list[int | None]
    train_accuracies: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    def to_dict(self) -> dict:
        return {"name": self.name, "spec": self.spec, "accuracies": self.accuracies, "mean": self.mean,
                "chosen_depths": self.chosen_depths, "train_accuracies": self.train_accuracies}


@dataclass
class AccuracyReport:
    dataset: str
    baseline: StrategyResult
    strategies: list[StrategyResult]
    class_names: list[str]
    protocol: dict
    tree_params: dict
    dropped_classes: dict[str, int]
    split_audit: list[dict]

    def delta(self, name: str) -> float:
        for s in self.strategies:
            if s.name == name:
                return s.mean - self.baseline.mean
        raise KeyError(name)

    def result(self, name: str) -> StrategyResult:
        if name == self.baseline.name:
            return self.baseline
        for s in self.strategies:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "baseline": self.baseline.to_dict(),
            "strategies": [{**s.to_dict(), "delta": s.mean - self.baseline.mean} for s in self.strategies],
            "class_names": self.class_names,
            "chance": 1.0 / len(self.class_names),
            "protocol": self.protocol,
            "tree_params": self.tree_params,
            "dropped_classes": self.dropped_classes,
        }

    def write_json(self, path: str | Path, extra: dict | None = None) -> None:
        Path(path).write_text(json.dumps({**(extra or {}), **self.to_dict()}, indent=2, sort_keys=True) + "\n")

    def write_split_audit(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.split_audit, indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        """One row per strategy: dataset, strategy, mean, per-repeat accuracies, delta."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "strategy", "mean_accuracy", "repeat_accuracies", "delta_vs_baseline"])
            w.writerow([self.dataset, self.baseline.name, repr(self.baseline.mean),
                        " ".join(repr(a) for a in self.baseline.accuracies), repr(0.0)])
            for s in self.strategies:
                w.writerow([self.dataset, s.name, repr(s.mean), " ".join(repr(a) for a in s.accuracies),
                            repr(s.mean - self.baseline.mean)])


def _features(tensors: Sequence[SessionTensor]) -> np.ndarray:
    return np.stack([t.data.reshape(-1) for t in tensors]) if tensors else np.zeros((0, 1600), dtype=np.uint8)


def _run_repeat(X: np.ndarray, y: np.ndarray, split: Split, params: TreeParams, grid, n_classes: int):
    # grow once without a depth limit; the validation grid replaces params.max_depth
    tree = train_decision_tree(X[split.train], y[split.train],
                               TreeParams(None, params.min_samples_leaf), n_classes=n_classes)
    best_depth, best_acc = None, -1.0
    for cap in grid:
        acc = float(np.mean(tree.predict(X[split.val], cap) == y[split.val])) if split.val.size else 0.0
        # strict improvement only, so ties keep the shallower cap
        if acc > best_acc:
            best_depth, best_acc = cap, acc
    test_acc = float(np.mean(tree.predict(X[split.test], best_depth) == y[split.test]))
    train_acc = float(np.mean(tree.predict(X[split.train], best_depth) == y[split.train]))
    return test_acc, best_depth, train_acc


def evaluate(
    tensors: Sequence[SessionTensor],
    specs: Sequence[tuple[str, OcclusionSpec]] = (),
    protocol: EvalProtocol = EvalProtocol(),
    params: TreeParams = TreeParams(),
    dataset: str = "dataset",
    workers: int = 1,
) -> AccuracyReport:
    """Baseline plus one result per named occlusion spec, all on the same splits."""
    names = sorted({t.label for t in tensors})
    counts = {c: sum(t.label == c for t in tensors) for c in names}
    dropped = {c: n for c, n in counts.items() if n < protocol.min_flows_per_class}
    for c, n in dropped.items():
        log.warning("class %s has %d flows (< %d); dropped", c, n, protocol.min_flows_per_class)
    kept = [t for t in tensors if t.label not in dropped]
    class_names = [c for c in names if c not in dropped]
    if len(class_names) < 2:
        raise DomainError(f"evaluation needs at least 2 classes with >= {protocol.min_flows_per_class} flows")
    code = {c: i for i, c in enumerate(class_names)}
    y = np.array([code[t.label] for t in kept], dtype=np.int64)
    ids = [t.session_id for t in kept]
    splits = [stratified_split(y, ids, protocol, r) for r in range(protocol.repeats)]
    grid = protocol.depth_grid

    def run(name: str, spec: OcclusionSpec | None) -> StrategyResult:
        data = kept if spec is None else occlude_all(kept, spec)
        X = _features(data)
        outs = [_run_repeat(X, y, s, params, grid, len(class_names)) for s in splits]
        return StrategyResult(name, spec.to_dict() if spec else None,
                              [o[0] for o in outs], [o[1] for o in outs], [o[2] for o in outs])

    jobs = [("baseline", None)] + list(specs)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: run(*j), jobs))
    else:
        results = [run(*j) for j in jobs]
    audit = [{**s.audit, "class_names": class_names} for s in splits]
    return AccuracyReport(dataset, results[0], results[1:], class_names, protocol.to_dict(),
                          params.to_dict(), dropped, audit)


def evaluate_strategy(
    tensors: Sequence[SessionTensor],
    spec: OcclusionSpec | None,
    protocol: EvalProtocol = EvalProtocol(),
    params: TreeParams = TreeParams(),
) -> StrategyResult:
    report = evaluate(tensors, [("occluded", spec)] if spec else [], protocol, params)
    return report.strategies[0] if spec else report.baseline

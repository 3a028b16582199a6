"""Decision-tree prediction of observed callee sets.

One tree per prediction scope maps the integer feature vector captured at the
scope entry to the id of a previously observed function set.  Trees are
classic top-down inducers: at each node every midpoint between adjacent
observed feature values is scored by weighted Gini impurity, and the best
split wins with deterministic tie-breaking (lowest feature index, then lowest
threshold).  A node also splits when no candidate improves impurity but some
candidate still partitions the data; this is what lets parity-style labelings
reach pure leaves instead of stalling at the root.  Growth stops at purity,
at the depth bound, or when the samples are indistinguishable.

Scopes that no training trace ever entered carry a fallback marker; the
runtime then activates the scope's full static set, trading surface for
guaranteed coverage.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .ir import Program, Trace
from .scopes import AnalysisResult, analyze_program


@dataclass(frozen=True)
class Sample:
    features: tuple[int, ...]
    label: int


@dataclass(frozen=True)
class TreeNode:
    label: int | None = None
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True)
class DecisionTree:
    root: TreeNode
    n_features: int

    def predict(self, features: Sequence[int]) -> int:
        if len(features) != self.n_features:
            raise ValueError(
                f"expected {self.n_features} features, got {len(features)}"
            )
        node = self.root
        while not node.is_leaf:
            node = node.left if features[node.feature] <= node.threshold else node.right
        assert node.label is not None
        return node.label

    @property
    def depth(self) -> int:
        def walk(n: TreeNode) -> int:
            return 0 if n.is_leaf else 1 + max(walk(n.left), walk(n.right))

        return walk(self.root)


def _gini(labels: Counter) -> float:
    n = sum(labels.values())
    return 1.0 - sum((c / n) ** 2 for c in labels.values())


def _majority(labels: Counter) -> int:
    best = max(labels.values())
    return min(l for l, c in labels.items() if c == best)


def train(samples: Sequence[Sample], max_depth: int | None = 10) -> DecisionTree:
    """Fit one tree; training is a pure function of the sample list.

    ``max_depth=None`` grows without bound; splits that partition the data
    still guarantee termination.
    """
    if not samples:
        raise ValueError("cannot train on an empty sample list")
    arity = len(samples[0].features)
    for s in samples:
        if len(s.features) != arity:
            raise ValueError("inconsistent feature arity in training samples")

    def build(rows: list[Sample], depth: int) -> TreeNode:
        labels = Counter(s.label for s in rows)
        if len(labels) == 1 or (max_depth is not None and depth >= max_depth):
            return TreeNode(label=_majority(labels))
        best: tuple[float, int, float] | None = None
        for feat in range(arity):
            values = sorted({s.features[feat] for s in rows})
            for lo, hi in zip(values, values[1:]):
                t = (lo + hi) / 2
                left = Counter(s.label for s in rows if s.features[feat] <= t)
                right = Counter(s.label for s in rows if s.features[feat] > t)
                nl, nr = sum(left.values()), sum(right.values())
                score = (nl * _gini(left) + nr * _gini(right)) / len(rows)
                if best is None or score < best[0]:
                    best = (score, feat, t)
        if best is None:
            # Indistinguishable samples with mixed labels.
            return TreeNode(label=_majority(labels))
        _, feat, t = best
        left_rows = [s for s in rows if s.features[feat] <= t]
        right_rows = [s for s in rows if s.features[feat] > t]
        return TreeNode(
            feature=feat,
            threshold=t,
            left=build(left_rows, depth + 1),
            right=build(right_rows, depth + 1),
        )

    return DecisionTree(root=build(list(samples), 0), n_features=arity)


def training_accuracy(tree: DecisionTree, samples: Sequence[Sample]) -> float:
    hits = sum(1 for s in samples if tree.predict(s.features) == s.label)
    return hits / len(samples)


@dataclass
class PredictorModel:
    """Per-scope trees; ``None`` marks the full-set fallback."""

    trees: dict[int, DecisionTree | None]

    def predict(self, entry: int, features: Sequence[int]) -> int | None:
        tree = self.trees.get(entry)
        if tree is None:
            return None
        try:
            return tree.predict(features)
        except ValueError:
            return None  # arity drift: fail safe toward the full set


def collect_samples(
    p: Program, analysis: AnalysisResult, traces: Iterable[Trace]
) -> dict[int, list[Sample]]:
    """Label every activation window with its observed-set id."""
    from .scopes import iter_activations

    label_of = {
        scg_id: {ps.functions: ps.id for ps in pscgs}
        for scg_id, pscgs in analysis.pscgs.items()
    }
    out: dict[int, list[Sample]] = {s.id: [] for s in analysis.scgs}
    for t in traces:
        for act in iter_activations(p, analysis.scgs, t):
            label = label_of.get(act.scg, {}).get(act.executed)
            if label is not None:
                out[act.scg].append(Sample(features=act.features, label=label))
    return out


def fit_all(
    p: Program,
    traces: Sequence[Trace],
    seed: int = 0,
    analysis: AnalysisResult | None = None,
    max_depth: int | None = 10,
) -> PredictorModel:
    """Train one tree per scope from profiling traces.

    ``seed`` is accepted for interface stability but unused: induction is
    fully deterministic.  Scopes with no samples get the fallback marker.
    """
    del seed
    if analysis is None:
        analysis = analyze_program(p, traces)
    samples = collect_samples(p, analysis, traces)
    trees: dict[int, DecisionTree | None] = {}
    for s in analysis.scgs:
        rows = samples.get(s.id, [])
        trees[s.id] = train(rows, max_depth=max_depth) if rows else None
    return PredictorModel(trees=trees)


MODEL_VERSION = 1


def _node_to_doc(n: TreeNode) -> dict | int:
    if n.is_leaf:
        return n.label
    return {
        "feature": n.feature,
        "threshold": n.threshold,
        "left": _node_to_doc(n.left),
        "right": _node_to_doc(n.right),
    }


def _node_from_doc(doc: dict | int) -> TreeNode:
    if isinstance(doc, int):
        return TreeNode(label=doc)
    return TreeNode(
        feature=doc["feature"],
        threshold=doc["threshold"],
        left=_node_from_doc(doc["left"]),
        right=_node_from_doc(doc["right"]),
    )


def serialize_model(m: PredictorModel) -> str:
    """Stable text form: identical models serialize byte-identically."""
    entries: dict[str, object] = {}
    for entry_id, tree in sorted(m.trees.items()):
        if tree is None:
            entries[str(entry_id)] = "fallback"
        else:
            entries[str(entry_id)] = {
                "n_features": tree.n_features,
                "tree": _node_to_doc(tree.root),
            }
    doc = {"format": "debloatkit-model", "version": MODEL_VERSION, "entries": entries}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def parse_model(text: str) -> PredictorModel:
    doc = json.loads(text)
    if doc.get("format") != "debloatkit-model" or doc.get("version") != MODEL_VERSION:
        raise ValueError("not a recognized model document")
    trees: dict[int, DecisionTree | None] = {}
    for key, entry in doc["entries"].items():
        if entry == "fallback":
            trees[int(key)] = None
        else:
            trees[int(key)] = DecisionTree(
                root=_node_from_doc(entry["tree"]), n_features=entry["n_features"]
            )
    return PredictorModel(trees=trees)

"""Exact depth-bounded policy-tree search over per-action score matrices.

The search maximizes ``sum_i gamma[i, tree(x_i)]`` over all axis-aligned
complete trees of the requested depth.  Candidate split values are midpoints
between consecutive distinct observed feature values, so the search is exact
for the declared depth.  Cost: depth 1 is O(p * (n log n + n * A)); depth 2
enumerates every (root feature, root split) pair and solves both child stumps
with presorted sweeps, O(p^2 * n^2 * A) in the worst case.  Depth is capped
at 2.

Ties resolve deterministically: lowest feature index, then smallest split
value, then earliest action in column order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidValueError

__all__ = ["TreeNode", "PolicyTree", "exact_tree_search", "predict_tree", "tree_objective"]


@dataclass(frozen=True)
class TreeNode:
    feature: int
    threshold: float


@dataclass(frozen=True)
class PolicyTree:
    """Complete binary policy tree; ``x[feature] <= threshold`` routes left.

    ``nodes`` is breadth-first: depth 1 has (root,); depth 2 has
    (root, left child, right child).  ``leaves`` lists action labels
    left-to-right.
    """

    depth: int
    nodes: tuple[TreeNode, ...]
    leaves: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "depth": self.depth,
            "nodes": [{"feature": n.feature, "value": n.threshold} for n in self.nodes],
            "leaves": list(self.leaves),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PolicyTree":
        return cls(
            depth=int(obj["depth"]),
            nodes=tuple(TreeNode(int(n["feature"]), float(n["value"])) for n in obj["nodes"]),
            leaves=tuple(obj["leaves"]),
        )


def predict_tree(tree: PolicyTree, features: np.ndarray) -> np.ndarray:
    """Route rows of ``features`` through the tree; returns leaf action labels."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ConfigError("features must be a 2-d matrix")
    root = tree.nodes[0]
    left = x[:, root.feature] <= root.threshold
    out = np.empty(len(x), dtype=object)
    if tree.depth == 1:
        out[left] = tree.leaves[0]
        out[~left] = tree.leaves[1]
        return out
    lnode, rnode = tree.nodes[1], tree.nodes[2]
    ll = left & (x[:, lnode.feature] <= lnode.threshold)
    out[ll] = tree.leaves[0]
    out[left & ~ll] = tree.leaves[1]
    rl = ~left & (x[:, rnode.feature] <= rnode.threshold)
    out[rl] = tree.leaves[2]
    out[~left & ~rl] = tree.leaves[3]
    return out


def tree_objective(tree: PolicyTree, features: np.ndarray, gamma: np.ndarray, actions: tuple[str, ...]) -> float:
    """Sum of per-unit scores under the tree's recommendations."""
    col = {a: j for j, a in enumerate(actions)}
    rec = predict_tree(tree, features)
    idx = np.array([col[a] for a in rec])
    return float(gamma[np.arange(len(rec)), idx].sum())


def _fallback_threshold(x_col: np.ndarray) -> float:
    return float(x_col.max()) if x_col.size else 0.0


def _best_stump(x: np.ndarray, gamma: np.ndarray, orders: list[np.ndarray], rows_mask: np.ndarray):
    """Best depth-1 tree on the rows in ``rows_mask``.

    Returns (objective, TreeNode, left action index, right action index).
    ``orders`` holds one global argsort per feature, reused across calls.
    """
    n, p = x.shape
    best = None  # (obj, feature, threshold, left_a, right_a)
    m = int(rows_mask.sum())
    if m == 0:
        return 0.0, TreeNode(0, 0.0), 0, 0
    for j in range(p):
        order = orders[j][rows_mask[orders[j]]]
        xs = x[order, j]
        g = gamma[order]
        prefix = np.cumsum(g, axis=0)
        total = prefix[-1]
        change = np.nonzero(xs[1:] > xs[:-1])[0] + 1  # positions where a new value starts
        if change.size == 0:
            if best is None:
                a = int(np.argmax(total))
                best = (float(total[a]), j, _fallback_threshold(xs), a, a)
            continue
        lefts = prefix[change - 1]
        rights = total[None, :] - lefts
        la = np.argmax(lefts, axis=1)
        ra = np.argmax(rights, axis=1)
        objs = lefts[np.arange(len(change)), la] + rights[np.arange(len(change)), ra]
        bpos = int(np.argmax(objs))  # first max -> smallest threshold
        obj = float(objs[bpos])
        thr = float((xs[change[bpos] - 1] + xs[change[bpos]]) / 2.0)
        cand = (obj, j, thr, int(la[bpos]), int(ra[bpos]))
        if best is None or cand[0] > best[0]:
            best = cand
    obj, j, thr, la, ra = best
    return obj, TreeNode(j, thr), la, ra


def exact_tree_search(features: np.ndarray, gamma: np.ndarray, actions: tuple[str, ...], depth: int) -> PolicyTree:
    """Exhaustive policy-tree search.

    ``features`` is (n, p) numeric, ``gamma`` is (n, len(actions)) with
    per-unit per-action scores.  Returns the objective-maximizing tree of
    exactly the requested depth (leaves may repeat actions, so shallower
    optima are representable).
    """
    x = np.asarray(features, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if depth not in (1, 2):
        raise ConfigError(f"tree depth must be 1 or 2, got {depth}")
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise InvalidValueError("features must be a nonempty 2-d matrix")
    if gamma.shape != (x.shape[0], len(actions)):
        raise InvalidValueError("score matrix shape does not match features/actions")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(gamma))):
        raise InvalidValueError("features and scores must be finite")

    n, p = x.shape
    orders = [np.argsort(x[:, j], kind="stable") for j in range(p)]
    all_rows = np.ones(n, dtype=bool)

    if depth == 1:
        _, node, la, ra = _best_stump(x, gamma, orders, all_rows)
        return PolicyTree(depth=1, nodes=(node,), leaves=(actions[la], actions[ra]))

    best = None  # (obj, root node, left stump, right stump)
    for j in range(p):
        order = orders[j]
        xs = x[order, j]
        change = np.nonzero(xs[1:] > xs[:-1])[0] + 1
        if change.size == 0:
            continue
        for t in change:
            thr = float((xs[t - 1] + xs[t]) / 2.0)
            left_mask = np.zeros(n, dtype=bool)
            left_mask[order[:t]] = True
            lobj, lnode, lla, lra = _best_stump(x, gamma, orders, left_mask)
            robj, rnode, rla, rra = _best_stump(x, gamma, orders, ~left_mask)
            obj = lobj + robj
            if best is None or obj > best[0]:
                best = (obj, TreeNode(j, thr), (lnode, lla, lra), (rnode, rla, rra))
    if best is None:  # every feature constant: degenerate tree routing everything left
        _, node, la, ra = _best_stump(x, gamma, orders, all_rows)
        child = TreeNode(0, _fallback_threshold(x[:, 0]))
        return PolicyTree(
            depth=2,
            nodes=(TreeNode(0, _fallback_threshold(x[:, 0])), child, child),
            leaves=(actions[la], actions[la], actions[la], actions[la]),
        )
    _, root, (lnode, lla, lra), (rnode, rla, rra) = best
    return PolicyTree(
        depth=2,
        nodes=(root, lnode, rnode),
        leaves=(actions[lla], actions[lra], actions[rla], actions[rra]),
    )

"""Decision-tree extraction, rational-π labelling and versioned JSON export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import errors
from .controllers import Controller, controller_from_description
from .graddiff.engine import rollout

TREE_SCHEMA = "fbgrape.tree/1"
STRATEGY_SCHEMA = "fbgrape.strategy/1"
DETERMINISM_TOL = 1e-9


# -- rationalization ------------------------------------------------------------------------

def rationalize_pi(x: float, max_den: int = 16, tol: float = 0.01 * math.pi):
    """Smallest-denominator ``(p, q)`` with ``|x − πp/q| ≤ tol``, or ``None``.

    Equal denominators are resolved toward the smaller ``|p|``.
    """
    if max_den < 1:
        raise errors.ConfigError("max_den must be ≥ 1")
    r = x / math.pi
    for q in range(1, max_den + 1):
        lo, hi = math.floor(r * q), math.ceil(r * q)
        hits = [p for p in {lo, hi} if abs(x - math.pi * p / q) <= tol]
        if hits:
            return min(hits, key=lambda v: (abs(v), v)), q
    return None


def pi_label(pq) -> str:
    if pq is None:
        return ""
    p, q = pq
    if p == 0:
        return "0"
    num = "π" if abs(p) == 1 else f"{abs(p)}π"
    sign = "-" if p < 0 else ""
    return f"{sign}{num}" if q == 1 else f"{sign}{num}/{q}"


# -- decision tree ----------------------------------------------------------------------------

@dataclass
class TreeNode:
    history: tuple
    probability: float = 0.0
    visits: int = 0
    segments: list = field(default_factory=list)      # segment indices executed at this history
    controls: list = field(default_factory=list)      # one control vector per listed segment
    children: dict = field(default_factory=dict)      # outcome label string -> TreeNode

    def rationalized(self, max_den: int = 16, tol: float = 0.01 * math.pi):
        return [[rationalize_pi(float(v), max_den, tol) for v in c] for c in self.controls]

    def walk(self):
        yield self
        for key in sorted(self.children):
            yield from self.children[key].walk()


@dataclass
class DecisionTree:
    task: str
    control_names: tuple
    labels: tuple
    root: TreeNode | None
    exact: bool = False
    n_rollouts: int = 0

    def nodes(self):
        return [] if self.root is None else list(self.root.walk())

    def most_probable_branch(self) -> list:
        out, node = [], self.root
        while node is not None:
            out.append(node)
            node = max(node.children.values(), key=lambda n: n.probability) if node.children else None
        return out


def _label_key(v) -> str:
    return f"{int(v):+d}"


def _segment_rows(parents, final_rows, depth_at, n_meas):
    """Row index inside the enumeration at ``depth_at`` for each final row."""
    idx = np.asarray(final_rows)
    for i in range(n_meas - 1, depth_at - 1, -1):
        idx = parents[i][idx]
    return idx


def extract_tree(task, controller: Controller, theta, n_rollouts: int = 1000, seed: int = 0,
                 exact: bool = False) -> DecisionTree:
    """Tree over observed outcome histories with visit probabilities.

    Empirical counts over ``n_rollouts`` sampled trajectories by default;
    ``exact=True`` uses enumeration weights instead.
    """
    if task.has_continuous:
        raise errors.ContractError("decision trees need discrete outcomes")
    tree = DecisionTree(task.name, tuple(task.control_names), tuple(task.labels), None, exact,
                        0 if exact else int(n_rollouts))
    if not exact and n_rollouts <= 0:
        return tree
    theta = np.asarray(theta, float)
    if exact:
        res = rollout(task, controller, theta, mode="enum", grad=False)
    else:
        res = rollout(task, controller, theta, mode="mc", batch=int(n_rollouts), seed=seed, grad=False)
    rows = res.outcomes.shape[0]
    J = res.outcomes.shape[1]
    w = res.weights if exact else np.full(rows, 1.0 / rows)
    depths = task.segment_depths()
    labels = [_label_key(v) for v in task.labels]

    nodes: dict = {}

    def node_for(h):
        if h not in nodes:
            nodes[h] = TreeNode(h)
            if h:
                nodes[h[:-1]].children[labels[h[-1]]] = nodes[h]
        return nodes[h]

    for r in range(rows):
        hist = tuple(int(k) for k in res.outcomes[r])
        for h in range(J + 1):
            n = node_for(hist[:h])
            n.probability += float(w[r])
            n.visits += 1
    for j, F in enumerate(res.controls):
        if F is None:
            continue
        h = depths[j]
        seg_rows = _segment_rows(res.row_parent, np.arange(rows), h, J) if exact else np.arange(rows)
        for r in range(rows):
            n = nodes[tuple(int(k) for k in res.outcomes[r, :h])]
            c = np.asarray(F[seg_rows[r]], float)
            if j in n.segments:
                prev = n.controls[n.segments.index(j)]
                if np.max(np.abs(prev - c)) > DETERMINISM_TOL:
                    raise errors.DeterminismError(
                        f"controls at history {n.history} segment {j} differ across visits "
                        f"({np.max(np.abs(prev - c)):.3g})")
            else:
                n.segments.append(j)
                n.controls.append(c)
    tree.root = nodes.get(())
    return tree


def render_tree(tree: DecisionTree, max_den: int = 16) -> str:
    """Indented text view; controls shown with their π fractions where one exists."""
    if tree.root is None:
        return "(empty tree)"
    lines = []

    def fmt(c):
        parts = []
        for name, v in zip(tree.control_names, c):
            lab = pi_label(rationalize_pi(float(v), max_den))
            parts.append(f"{name}={v:.4f}" + (f" ({lab})" if lab else ""))
        return ", ".join(parts)

    def visit(node, key, indent):
        head = "root" if key is None else key
        pad = "  " * indent
        lines.append(f"{pad}[{head}] p={node.probability:.4f}")
        for j, c in zip(node.segments, node.controls):
            lines.append(f"{pad}  seg {j}: {fmt(c)}")
        for k in sorted(node.children):
            visit(node.children[k], k, indent + 1)

    visit(tree.root, None, 0)
    return "\n".join(lines)


# -- serialization ------------------------------------------------------------------------------

def _dump(doc: dict, path) -> None:
    text = json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=False) + "\n"
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _load(path, schema: str) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    got = doc.get("schema")
    if got != schema:
        raise errors.SchemaVersionError(f"expected schema '{schema}', found '{got}'")
    return doc


def _node_doc(n: TreeNode, max_den: int) -> dict:
    return {
        "history": list(n.history),
        "probability": n.probability,
        "visits": n.visits,
        "segments": list(n.segments),
        "controls": [[float(v) for v in c] for c in n.controls],
        "pi_fraction": [[None if pq is None else list(pq) for pq in row] for row in n.rationalized(max_den)],
        "children": {k: _node_doc(c, max_den) for k, c in n.children.items()},
    }


def _node_from(doc: dict) -> TreeNode:
    n = TreeNode(tuple(doc["history"]), doc["probability"], doc["visits"], list(doc["segments"]),
                 [np.asarray(c, float) for c in doc["controls"]])
    n.children = {k: _node_from(c) for k, c in doc["children"].items()}
    return n


def tree_to_dict(tree: DecisionTree, max_den: int = 16) -> dict:
    return {"schema": TREE_SCHEMA, "task": tree.task, "control_names": list(tree.control_names),
            "labels": list(tree.labels), "exact": tree.exact, "n_rollouts": tree.n_rollouts,
            "root": None if tree.root is None else _node_doc(tree.root, max_den)}


def export_tree(tree: DecisionTree, path) -> None:
    _dump(tree_to_dict(tree), path)


def load_tree(path) -> DecisionTree:
    doc = _load(path, TREE_SCHEMA)
    root = None if doc["root"] is None else _node_from(doc["root"])
    return DecisionTree(doc["task"], tuple(doc["control_names"]), tuple(doc["labels"]), root,
                        doc["exact"], doc["n_rollouts"])


@dataclass
class Strategy:
    task: str
    overrides: dict
    controller: Controller
    theta: np.ndarray
    extra: dict = field(default_factory=dict)


def export_strategy(strategy: Strategy | DecisionTree, path) -> None:
    """Write a controller + θ document, or a tree document when given a tree."""
    if isinstance(strategy, DecisionTree):
        export_tree(strategy, path)
        return
    desc = strategy.controller.describe()
    if desc.get("kind") not in ("table", "dense", "recurrent"):
        raise errors.ContractError(f"controller '{desc.get('kind')}' has no parameter export; export its tree")
    doc = {"schema": STRATEGY_SCHEMA, "task": strategy.task, "overrides": dict(strategy.overrides),
           "controller": desc, "theta": [float(v) for v in np.asarray(strategy.theta).ravel()],
           "extra": dict(strategy.extra)}
    _dump(doc, path)


def load_strategy(path) -> Strategy:
    doc = _load(path, STRATEGY_SCHEMA)
    ctl = controller_from_description(doc["controller"])
    theta = np.asarray(doc["theta"], float)
    if theta.size != ctl.n_params:
        raise errors.ConfigError(f"strategy has {theta.size} parameters, controller expects {ctl.n_params}")
    return Strategy(doc["task"], doc["overrides"], ctl, theta, doc.get("extra", {}))

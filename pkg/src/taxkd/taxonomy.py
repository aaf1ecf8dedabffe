"""Local taxonomy tree built from lineage strings, plus leaf-probability marginalisation.

Lineages are written as semicolon separated tokens, e.g.
``d__Bacteria;p__Firmicutes;c__Bacilli``.  Rank is the token position; the
usual GTDB rank prefixes are honoured only to reject out-of-order lineages.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateTreeError, NumericError, ParseError, UnknownLabelError

PROB_FLOOR = 1e-12
RANK_PREFIXES = "dpcofgs"
_PREFIX_RE = re.compile(r"^([a-z])__(.*)$")


@dataclass(frozen=True)
class RankedPath:
    """A root-to-node lineage. The empty path means "unassigned"."""

    names: tuple[str, ...] = ()

    def __post_init__(self):
        for name in self.names:
            if not name or name != name.strip() or any(c in name for c in ";\t\n\r"):
                raise ValueError(f"invalid taxon name {name!r}")

    @classmethod
    def parse(cls, text: str, line: int | None = None) -> RankedPath:
        text = text.strip()
        if not text:
            return cls()
        names = [tok.strip() for tok in text.split(";")]
        last_rank = -1
        for name in names:
            if not name:
                raise ParseError(f"empty name token in lineage {text!r}", line)
            m = _PREFIX_RE.match(name)
            if m is None:
                continue
            prefix, rest = m.groups()
            if not rest.strip():
                raise ParseError(f"empty name token {name!r} in lineage {text!r}", line)
            if prefix in RANK_PREFIXES:
                rank = RANK_PREFIXES.index(prefix)
                if rank <= last_rank:
                    raise ParseError(f"non-monotone ranks in lineage {text!r}", line)
                last_rank = rank
        return cls(tuple(names))

    @property
    def labels(self) -> list[tuple[int, str]]:
        return list(enumerate(self.names))

    @property
    def depth(self) -> int:
        return len(self.names)

    def truncate(self, depth: int) -> RankedPath:
        return RankedPath(self.names[:depth])

    def __len__(self) -> int:
        return len(self.names)

    def __str__(self) -> str:
        return ";".join(self.names)


def parse_paths(lines: Iterable[str]) -> list[RankedPath]:
    return [RankedPath.parse(text, line=i) for i, text in enumerate(lines, start=1)]


@dataclass(frozen=True)
class TaxNode:
    id: int
    parent: int | None
    name: str
    depth: int


class TaxTree:
    """Immutable rooted tree; node 0 is the root.

    Node ids follow first appearance in the input. Leaf slots follow a
    depth-first walk with children sorted by name, so the leaves under any
    node occupy a contiguous slot range ``leaf_range[u]``.
    """

    def __init__(self, nodes: Sequence[TaxNode]):
        self.nodes: tuple[TaxNode, ...] = tuple(nodes)
        n = len(self.nodes)
        kids: list[list[int]] = [[] for _ in range(n)]
        for node in self.nodes[1:]:
            kids[node.parent].append(node.id)
        self.children: tuple[tuple[int, ...], ...] = tuple(
            tuple(sorted(k, key=lambda c: self.nodes[c].name)) for k in kids
        )

        self.path_cache: tuple[tuple[int, ...], ...] = tuple(self._walk_up(u) for u in range(n))
        self._by_path = {
            tuple(self.nodes[v].name for v in self.path_cache[u]): u for u in range(n)
        }

        leaf_nodes: list[int] = []
        leaf_range = np.zeros((n, 2), dtype=np.int64)
        stack: list[tuple[int, bool]] = [(0, False)]
        while stack:
            u, done = stack.pop()
            if done:
                leaf_range[u, 1] = len(leaf_nodes)
                continue
            leaf_range[u, 0] = len(leaf_nodes)
            if not self.children[u] and u != 0:
                leaf_nodes.append(u)
            stack.append((u, True))
            stack.extend((c, False) for c in reversed(self.children[u]))
        self.leaf_nodes = np.asarray(leaf_nodes, dtype=np.int64)
        self.leaf_index: dict[int, int] = {u: s for s, u in enumerate(leaf_nodes)}
        self.leaf_range = leaf_range
        self.leaf_range.setflags(write=False)
        self.leaf_nodes.setflags(write=False)
        self._fold_plan = self._make_fold_plan()

    def _walk_up(self, u: int) -> tuple[int, ...]:
        out = []
        while u != 0:
            out.append(u)
            u = self.nodes[u].parent
        return tuple(reversed(out))

    def _make_fold_plan(self) -> list[tuple[np.ndarray, np.ndarray]]:
        # One (parents, children) step per (depth, sibling position); deepest first.
        # Applying the steps in order adds every node's children left to right.
        plan = []
        max_depth = max(node.depth for node in self.nodes)
        for depth in range(max_depth, 0, -1):
            parents_at = [u for u in range(len(self.nodes)) if self.nodes[u].depth == depth - 1]
            width = max((len(self.children[u]) for u in parents_at), default=0)
            for j in range(width):
                ps = [u for u in parents_at if len(self.children[u]) > j]
                cs = [self.children[u][j] for u in ps]
                plan.append((np.asarray(ps, dtype=np.int64), np.asarray(cs, dtype=np.int64)))
        return plan

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_nodes)

    @property
    def max_depth(self) -> int:
        return max(node.depth for node in self.nodes)

    def is_leaf(self, u: int) -> bool:
        return u != 0 and not self.children[u]

    def descendant_mask(self, u: int) -> np.ndarray:
        """Leaf slots under node ``u`` in ascending order."""
        self._check_id(u)
        lo, hi = self.leaf_range[u]
        return np.arange(lo, hi)

    def node_of(self, path: RankedPath | str) -> int:
        if isinstance(path, str):
            path = RankedPath.parse(path)
        try:
            return self._by_path[path.names]
        except KeyError:
            raise UnknownLabelError(f"lineage not in tree: {str(path)!r}") from None

    def path_of(self, u: int) -> RankedPath:
        self._check_id(u)
        return RankedPath(tuple(self.nodes[v].name for v in self.path_cache[u]))

    def canonical_paths(self) -> list[RankedPath]:
        """Paths of all non-root nodes in node-id order; rebuilding from them reproduces the tree."""
        return [self.path_of(u) for u in range(1, self.n_nodes)]

    def leaf_paths(self) -> list[RankedPath]:
        return [self.path_of(int(u)) for u in self.leaf_nodes]

    def _check_id(self, u: int) -> None:
        if not 0 <= u < self.n_nodes:
            raise IndexError(f"node id {u} out of range [0, {self.n_nodes})")

    def __repr__(self) -> str:
        return f"TaxTree(n_nodes={self.n_nodes}, n_leaves={self.n_leaves})"


def build_tree(paths: Iterable[RankedPath | str]) -> TaxTree:
    """Build the tree holding every prefix of every input lineage.

    String inputs are parsed here; a malformed one raises :class:`ParseError`
    carrying its 1-based position in ``paths``.
    """
    nodes = [TaxNode(0, None, "", 0)]
    index: dict[tuple[str, ...], int] = {(): 0}
    seen_any = False
    for line, path in enumerate(paths, start=1):
        seen_any = True
        if isinstance(path, str):
            path = RankedPath.parse(path, line=line)
        for depth in range(1, len(path.names) + 1):
            key = path.names[:depth]
            if key not in index:
                index[key] = len(nodes)
                nodes.append(TaxNode(len(nodes), index[key[:-1]], key[-1], depth))
    if not seen_any:
        raise ValueError("build_tree needs at least one path")
    return TaxTree(nodes)


def leaf_probabilities(logits) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] == 0:
        raise DegenerateTreeError("tree has no leaves")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logit")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def node_probabilities(tree: TaxTree, leaf_probs) -> np.ndarray:
    """Marginal probability of every node, shape ``leaf_probs.shape[:-1] + (n_nodes,)``.

    Internal values are built bottom-up so each node is exactly the
    left-to-right sum of its children's values.
    """
    p = np.asarray(leaf_probs, dtype=np.float64)
    if tree.n_leaves == 0:
        raise DegenerateTreeError("tree has no leaves")
    if p.shape[-1] != tree.n_leaves:
        raise ValueError(f"expected {tree.n_leaves} leaf probabilities, got {p.shape[-1]}")
    vals = np.zeros(p.shape[:-1] + (tree.n_nodes,))
    vals[..., tree.leaf_nodes] = p
    for parents, kids in tree._fold_plan:
        vals[..., parents] += vals[..., kids]
    return vals


def node_probability(tree: TaxTree, leaf_probs, node_id: int):
    tree._check_id(node_id)
    return node_probabilities(tree, leaf_probs)[..., node_id]


def path_log_likelihood(tree: TaxTree, leaf_probs, target: RankedPath | str) -> float:
    """Sum of log marginal probabilities along ``target``; the root term is dropped."""
    u = tree.node_of(target)
    path = tree.path_cache[u]
    if not path:
        return 0.0
    probs = node_probabilities(tree, leaf_probs)[list(path)]
    return float(np.sum(np.log(np.maximum(probs, PROB_FLOOR))))

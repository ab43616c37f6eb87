"""Feature trees, the ancestor-indicator aggregation matrix and aggregating sets.

Node numbering is canonical: leaves are ``1..p`` (feature ``j`` is leaf
``j``), internal nodes are ``p+1..N`` with every parent numbered after its
children, and the root is ``N``. Internally node ``u`` lives at index
``u - 1``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import kernels

LINKAGES = ("complete", "average", "single", "ward")


class TreeError(ValueError):
    """Raised for malformed tree input."""


@dataclass(frozen=True)
class NodeRecord:
    id: int
    parent: int | None
    children: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class FeatureTree:
    """Rooted full tree whose leaves are the features.

    ``parent[i]`` is the 0-based index of the parent of node ``i + 1``
    (``-1`` for the root). ``heights`` holds merge heights when the tree
    came from hierarchical clustering.
    """

    parent: np.ndarray
    leaf_count: int
    heights: np.ndarray | None = None
    labels: tuple = field(default=(), compare=False)

    def __post_init__(self):
        self.parent.setflags(write=False)
        if self.heights is not None:
            self.heights.setflags(write=False)

    @property
    def node_count(self) -> int:
        return int(self.parent.shape[0])

    @property
    def root_id(self) -> int:
        return self.node_count

    @property
    def root_index(self) -> int:
        return self.node_count - 1

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        """Children (0-based indices) of each node, ascending."""
        kids: list[list[int]] = [[] for _ in range(self.node_count)]
        for i, par in enumerate(self.parent):
            if par >= 0:
                kids[par].append(i)
        return tuple(tuple(k) for k in kids)

    @property
    def nodes(self) -> tuple[NodeRecord, ...]:
        return tuple(
            NodeRecord(i + 1, None if par < 0 else int(par) + 1,
                       tuple(c + 1 for c in self.children[i]))
            for i, par in enumerate(self.parent))

    def is_leaf(self, node_id: int) -> bool:
        return node_id <= self.leaf_count

    @cached_property
    def leaf_sets(self) -> tuple[np.ndarray, ...]:
        """0-based leaf (feature) indices below each node, ascending."""
        out: list[np.ndarray | None] = [None] * self.node_count
        for i in range(self.node_count):  # children precede parents
            if i < self.leaf_count:
                out[i] = np.array([i])
            else:
                out[i] = np.sort(np.concatenate([out[c] for c in self.children[i]]))
        return tuple(out)

    def leaves(self, node_id: int) -> np.ndarray:
        """1-based feature ids in the branch rooted at ``node_id``."""
        return self.leaf_sets[node_id - 1] + 1

    @cached_property
    def depths(self) -> np.ndarray:
        """Number of nodes on the root-to-node path, inclusive."""
        d = np.zeros(self.node_count, dtype=int)
        for i in range(self.node_count - 1, -1, -1):
            par = self.parent[i]
            d[i] = 1 if par < 0 else d[par] + 1
        return d

    def ancestors(self, node_id: int) -> list[int]:
        out = []
        i = self.parent[node_id - 1]
        while i >= 0:
            out.append(int(i) + 1)
            i = self.parent[i]
        return out

    def postorder(self, child_order=None) -> list[int]:
        """0-based indices in a postorder traversal from the root."""
        order = []
        stack = [(self.root_index, False)]
        while stack:
            i, seen = stack.pop()
            if seen:
                order.append(i)
                continue
            stack.append((i, True))
            kids = list(self.children[i])
            if child_order is not None:
                kids = child_order(i, kids)
            stack.extend((c, False) for c in reversed(kids))
        return order


@dataclass(frozen=True)
class AggregatingSet:
    """Set of node ids whose branches partition the leaves."""

    node_ids: frozenset

    def __iter__(self):
        return iter(sorted(self.node_ids))

    def __len__(self):
        return len(self.node_ids)

    def __contains__(self, item):
        return item in self.node_ids

    def ordered(self, tree: FeatureTree) -> list[int]:
        """Members sorted by the smallest feature index they contain."""
        return sorted(self.node_ids, key=lambda u: tree.leaf_sets[u - 1][0])

    def is_valid(self, tree: FeatureTree) -> bool:
        seen = np.zeros(tree.leaf_count, dtype=int)
        for u in self.node_ids:
            if not 1 <= u <= tree.node_count:
                return False
            seen[tree.leaf_sets[u - 1]] += 1
        return bool(np.all(seen == 1))

    def labels(self, tree: FeatureTree) -> np.ndarray:
        """Group label (position in :meth:`ordered`) of every feature."""
        lab = np.empty(tree.leaf_count, dtype=int)
        for g, u in enumerate(self.ordered(tree)):
            lab[tree.leaf_sets[u - 1]] = g
        return lab


class AggregationMatrix:
    """Binary ``p x |T|`` matrix with ``A[j, k] = 1`` iff node k is leaf j or one of its ancestors."""

    def __init__(self, tree: FeatureTree):
        self.tree = tree
        rows = np.concatenate(tree.leaf_sets)
        cols = np.repeat(np.arange(tree.node_count), [len(s) for s in tree.leaf_sets])
        self.sparse = sp.csc_matrix(
            (np.ones(rows.shape[0]), (rows, cols)),
            shape=(tree.leaf_count, tree.node_count))

    @property
    def shape(self):
        return self.sparse.shape

    def toarray(self) -> np.ndarray:
        return self.sparse.toarray()

    def column_leaves(self, node_id: int) -> np.ndarray:
        return self.tree.leaves(node_id)

    def __matmul__(self, other):
        return self.sparse @ other

    def submatrix(self, node_ids: Iterable[int]) -> sp.csc_matrix:
        """Columns ``A_B`` for the given node ids, in the order given."""
        idx = [u - 1 for u in node_ids]
        return self.sparse[:, idx]


def aggregation_matrix(tree: FeatureTree) -> AggregationMatrix:
    return AggregationMatrix(tree)


def _validate(parent: np.ndarray, p: int) -> None:
    N = parent.shape[0]
    if N == 0:
        raise TreeError("empty tree")
    if parent[N - 1] != -1 or np.count_nonzero(parent < 0) != 1:
        raise TreeError("root must be the unique last node")
    kids = np.bincount(parent[parent >= 0], minlength=N)
    if np.any(kids[:p] != 0) or np.any(kids[p:] < 2):
        raise TreeError("tree is not full with leaves 1..p")
    if np.any(parent[:-1] <= np.arange(N - 1)):
        raise TreeError("parents must be numbered after their children")


def _make_tree(parent, p, heights=None, labels=()) -> FeatureTree:
    parent = np.asarray(parent, dtype=np.int64)
    _validate(parent, p)
    if heights is not None:
        heights = np.asarray(heights, dtype=float)
    return FeatureTree(parent=parent, leaf_count=p, heights=heights, labels=tuple(labels))


def _sort_key(x):
    return (0, x, "") if isinstance(x, (int, np.integer)) else (1, 0, str(x))


def build_from_parent_list(parents: Sequence[tuple], collapse: bool = False,
                           heights: dict | None = None) -> FeatureTree:
    """Build a validated tree from ``(node_id, parent_id_or_None)`` pairs.

    Leaves are mapped to features in ascending id order. If the ids are
    already canonical they are kept; otherwise internal nodes are renumbered
    in postorder (children visited by smallest contained leaf). With
    ``collapse`` set, internal nodes with a single child are spliced out.
    """
    par: dict = {}
    for node, pa in parents:
        if node in par:
            raise TreeError(f"duplicate node id {node!r}")
        par[node] = None if pa is None or pa == "" else pa
    roots = [u for u, pa in par.items() if pa is None]
    if len(roots) != 1:
        raise TreeError(f"expected exactly one root, found {len(roots)}")
    for u, pa in par.items():
        if pa is not None and pa not in par:
            raise TreeError(f"parent {pa!r} of node {u!r} is not a node")
    # every node must reach the root without revisiting
    state: dict = {}
    for u in par:
        path = []
        v = u
        while v is not None and v not in state:
            if v in path:
                raise TreeError(f"cycle detected through node {v!r}")
            path.append(v)
            v = par[v]
        for w in path:
            state[w] = True
    kids: dict = {u: [] for u in par}
    for u, pa in par.items():
        if pa is not None:
            kids[pa].append(u)
    unary = [u for u, k in kids.items() if len(k) == 1]
    if unary and not collapse:
        raise TreeError(f"internal node {unary[0]!r} has a single child; tree is not full")
    heights = dict(heights or {})
    while unary:
        u = unary.pop()
        (c,) = kids[u]
        pa = par[u]
        par[c] = pa
        if pa is not None:
            kids[pa] = [c if w == u else w for w in kids[pa]]
        del par[u], kids[u]
        heights.pop(u, None)
    root = next(u for u, pa in par.items() if pa is None)
    leaves = sorted((u for u, k in kids.items() if not k), key=_sort_key)
    p = len(leaves)
    N = len(par)
    canonical = (all(isinstance(u, (int, np.integer)) for u in par)
                 and sorted(leaves) == list(range(1, p + 1))
                 and root == N
                 and set(par) == set(range(1, N + 1))
                 and all(pa is None or pa > u for u, pa in par.items()))
    if canonical:
        index = {u: u - 1 for u in par}
    else:
        index = {u: i for i, u in enumerate(leaves)}
        minleaf: dict = {}

        def leafmin(u):
            if u not in minleaf:
                minleaf[u] = index[u] if not kids[u] else min(leafmin(c) for c in kids[u])
            return minleaf[u]

        order = []
        stack = [(root, False)]
        while stack:
            u, seen = stack.pop()
            if seen:
                if kids[u]:
                    order.append(u)
                continue
            stack.append((u, True))
            stack.extend((c, False) for c in sorted(kids[u], key=leafmin, reverse=True))
        for i, u in enumerate(order):
            index[u] = p + i
    parent = np.full(N, -1, dtype=np.int64)
    labels = [None] * N
    for u, pa in par.items():
        labels[index[u]] = u
        if pa is not None:
            parent[index[u]] = index[pa]
    h = None
    if heights:
        h = np.zeros(N)
        for u, val in heights.items():
            if u in index:
                h[index[u]] = float(val)
    return _make_tree(parent, p, h, labels)


def star_tree(p: int) -> FeatureTree:
    """Root with ``p`` leaf children (a single leaf when ``p == 1``)."""
    if p == 1:
        return _make_tree([-1], 1)
    return _make_tree([p] * p + [-1], p)


def tree_from_merges(merges: np.ndarray, heights: np.ndarray, n: int) -> FeatureTree:
    """Binary tree from a scipy-style merge table over ``n`` leaves."""
    if n == 1:
        return _make_tree([-1], 1, np.zeros(1))
    parent = np.full(2 * n - 1, -1, dtype=np.int64)
    for step, (a, b) in enumerate(merges):
        parent[a] = n + step
        parent[b] = n + step
    h = np.concatenate([np.zeros(n), np.asarray(heights, dtype=float)])
    return _make_tree(parent, n, h)


def pairwise_distances(vectors: np.ndarray) -> np.ndarray:
    diff = vectors[:, None, :] - vectors[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def build_tree_hclust(vectors, linkage: str = "complete") -> FeatureTree:
    """Agglomerative clustering (Euclidean distance) of the rows of ``vectors``.

    Ties between equal merge distances go to the lexicographically smallest
    pair of clusters, ordered by their smallest member index.
    """
    V = np.asarray(vectors, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    if V.ndim != 2 or V.shape[0] < 1 or V.shape[1] < 1:
        raise ValueError("vectors must be a non-empty 2-D array")
    if not np.all(np.isfinite(V)):
        raise ValueError("vectors contain non-finite entries")
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}; choose from {LINKAGES}")
    n = V.shape[0]
    merges, heights = kernels.agglomerate(pairwise_distances(V), linkage)
    return tree_from_merges(merges, heights, n)


def coarsest_aggregating_set(tree: FeatureTree, beta, tol: float = 0.0) -> AggregatingSet:
    """Coarsest aggregating set on whose branches ``beta`` is constant.

    A branch is constant when the spread (max - min) of ``beta`` over its
    leaves is at most ``tol``. The result is the set of maximal constant
    branches, which is unique.
    """
    b = np.asarray(beta, dtype=float)
    if b.shape != (tree.leaf_count,):
        raise ValueError("beta must have one entry per leaf")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    N = tree.node_count
    lo = np.empty(N)
    hi = np.empty(N)
    lo[:tree.leaf_count] = b
    hi[:tree.leaf_count] = b
    for i in range(tree.leaf_count, N):
        ch = list(tree.children[i])
        lo[i] = lo[ch].min()
        hi[i] = hi[ch].max()
    const = (hi - lo) <= tol
    par = tree.parent
    chosen = [i + 1 for i in range(N) if const[i] and (par[i] < 0 or not const[par[i]])]
    return AggregatingSet(frozenset(chosen))


def cut_tree_k(tree: FeatureTree, k: int) -> AggregatingSet:
    """Split the tree into ``k`` branches by undoing the ``k - 1`` highest merges.

    Merges are ranked by height, then by node id (later merges first), so
    the removed set is always closed under taking ancestors.
    """
    if tree.heights is None:
        raise ValueError("cutting into k groups needs merge heights")
    internal = np.arange(tree.leaf_count, tree.node_count)
    if not 1 <= k <= tree.leaf_count:
        raise ValueError("k must be between 1 and the number of leaves")
    order = sorted(internal, key=lambda i: (tree.heights[i], i), reverse=True)
    removed = set()
    members = {tree.root_index}
    for i in order:
        if len(members) >= k:
            break
        removed.add(i)
        members.discard(i)
        members.update(tree.children[i])
    if len(members) != k:
        raise ValueError(f"cannot cut this tree into exactly {k} branches")
    return AggregatingSet(frozenset(int(i) + 1 for i in members))


def cut_tree(tree: FeatureTree, mode: str, threshold: float, X=None) -> AggregatingSet:
    """Unsupervised aggregation by dendrogram height or by column density.

    ``height``: maximal branches whose merge height is at most
    ``threshold`` (leaves always qualify).
    ``density``: bottom-up merging until every aggregated column of
    ``X A_B`` has a nonzero fraction of at least ``threshold``; a branch
    that cannot reach the threshold is merged up to the root.
    """
    N = tree.node_count
    par = tree.parent
    if mode == "height":
        if tree.heights is None:
            raise ValueError("height cut needs merge heights")
        ok = np.zeros(N, dtype=bool)
        ok[:tree.leaf_count] = True
        for i in range(tree.leaf_count, N):
            ok[i] = tree.heights[i] <= threshold and all(ok[c] for c in tree.children[i])
        chosen = [i + 1 for i in range(N) if ok[i] and (par[i] < 0 or not ok[par[i]])]
        return AggregatingSet(frozenset(chosen))
    if mode == "density":
        if X is None:
            raise ValueError("density cut needs the design matrix X")
        XA = sp.csc_matrix(_as_matrix(X) @ aggregation_matrix(tree).sparse)
        n = XA.shape[0]
        nnz = np.diff(sp.csc_matrix(XA != 0).indptr)
        dense = nnz / n >= threshold
        resolved = np.zeros(N, dtype=bool)
        picks: list[list[int]] = [[] for _ in range(N)]
        for i in range(N):
            if i < tree.leaf_count:
                resolved[i] = dense[i]
                picks[i] = [i]
                continue
            ch = tree.children[i]
            if all(resolved[c] for c in ch):
                resolved[i] = True
                picks[i] = [u for c in ch for u in picks[c]]
            else:
                resolved[i] = bool(dense[i])
                picks[i] = [i]
        root = tree.root_index
        chosen = picks[root] if resolved[root] else [root]
        return AggregatingSet(frozenset(u + 1 for u in chosen))
    raise ValueError(f"unknown cut mode {mode!r}")


def _as_matrix(X):
    values = getattr(X, "values", X)
    if sp.issparse(values):
        return sp.csr_matrix(values)
    return sp.csr_matrix(np.asarray(values, dtype=float))


def read_tree_csv(path_or_text, collapse: bool = False) -> FeatureTree:
    """Parse a ``node_id,parent_id[,height]`` CSV (root has an empty parent)."""
    # strings holding CSV content have a newline or a comma; anything else is a path
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str)
                                          and not any(c in path_or_text for c in "\n,")):
        text = Path(path_or_text).read_text()
    else:
        text = str(path_or_text)
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader, [])]
    if header[:2] != ["node_id", "parent_id"]:
        raise TreeError("line 1: header must start with node_id,parent_id")
    has_h = len(header) > 2 and header[2] == "height"
    pairs = []
    heights = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            node = _parse_id(row[0])
            pa = row[1].strip() if len(row) > 1 else ""
            pairs.append((node, _parse_id(pa) if pa else None))
            if has_h and len(row) > 2 and row[2].strip():
                heights[node] = float(row[2])
        except (ValueError, IndexError) as exc:
            raise TreeError(f"line {lineno}: {exc}") from None
    return build_from_parent_list(pairs, collapse=collapse, heights=heights if has_h else None)


def _parse_id(tok: str):
    tok = tok.strip()
    try:
        return int(tok)
    except ValueError:
        if not tok:
            raise ValueError("empty node id")
        return tok


def format_float(x: float) -> str:
    """Locale-independent, round-trip exact float text."""
    return repr(float(x))


def write_tree_csv(tree: FeatureTree, path=None) -> str:
    """Write the canonical parent list; returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    has_h = tree.heights is not None
    w.writerow(["node_id", "parent_id"] + (["height"] if has_h else []))
    for i, pa in enumerate(tree.parent):
        row = [i + 1, "" if pa < 0 else int(pa) + 1]
        if has_h:
            row.append(format_float(tree.heights[i]))
        w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text

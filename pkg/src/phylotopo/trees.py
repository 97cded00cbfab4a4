"""Tree topology representation, Newick I/O, enumeration and traversals.

A topology is stored as an arena of nodes with adjacency lists.  Leaves carry
a taxon index, interior nodes do not.  Unrooted bifurcating trees have all
interior degrees equal to 3; rooted ones have a degree-2 root.  Branch lengths
never live on the topology; they are carried separately as a vector indexed by
edge id (see ``TreeTopology.edges``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEWICK_METACHARS = set("(),:;")


class TreeError(ValueError):
    """Malformed tree, Newick syntax error, or invariant violation."""


def double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def n_unrooted_topologies(n_taxa: int) -> int:
    """(2N-5)!! distinct unrooted bifurcating topologies on N labelled tips."""
    return double_factorial(2 * n_taxa - 5)


class TaxaSet:
    """Ordered set of unique taxon names with a name <-> index bijection."""

    __slots__ = ("names", "index")

    def __init__(self, names):
        names = tuple(names)
        # two-taxon sets occur in alignments; trees enforce >= 3 themselves
        if len(names) < 2:
            raise TreeError(f"need at least 2 taxa, got {len(names)}")
        for name in names:
            if not name or set(name) & NEWICK_METACHARS:
                raise TreeError(f"invalid taxon name {name!r}")
        if len(set(names)) != len(names):
            raise TreeError("duplicate taxon names")
        self.names = names
        self.index = {name: k for k, name in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        return isinstance(other, TaxaSet) and self.names == other.names

    def __hash__(self) -> int:
        return hash(self.names)

    def __repr__(self) -> str:
        return f"TaxaSet({list(self.names)!r})"

    @property
    def full_mask(self) -> int:
        return (1 << len(self.names)) - 1


@dataclass(frozen=True)
class TraversalOrder:
    """Postorder/preorder node sequences plus the parent map for a given root."""

    postorder: np.ndarray
    preorder: np.ndarray
    parent: np.ndarray  # parent[node] = parent id, -1 at the root


class TreeTopology:
    """Arena-based phylogenetic tree topology (immutable after construction).

    Node ids are dense in [0, n_nodes).  ``taxon[u]`` is the taxon index for
    leaves, -1 for interior nodes.  ``edges`` fixes the edge-id order used by
    every per-edge vector (branch lengths, gradients).
    """

    __slots__ = (
        "taxa",
        "neighbors",
        "taxon",
        "rooted",
        "root_id",
        "edges",
        "edge_index",
        "_traversal_cache",
        "_splits",
        "_split_of_edge",
        "cache",
    )

    def __init__(self, taxa: TaxaSet, edges, leaf_taxon: dict, rooted: bool,
                 root_id: int | None = None):
        n_nodes = max(max(u, v) for u, v in edges) + 1
        neighbors: list[list[int]] = [[] for _ in range(n_nodes)]
        for u, v in edges:
            if u == v:
                raise TreeError("self loop")
            neighbors[u].append(v)
            neighbors[v].append(u)

        taxon = [-1] * n_nodes
        seen = set()
        for node, k in leaf_taxon.items():
            if k in seen:
                raise TreeError(f"taxon index {k} on two leaves")
            seen.add(k)
            taxon[node] = k
        if seen != set(range(len(taxa))):
            raise TreeError("leaves do not cover the taxon set exactly")

        # Degree / connectivity invariants.
        n_leaves = len(taxa)
        if n_leaves < 3:
            raise TreeError("trees need at least 3 taxa")
        if len(edges) != n_nodes - 1:
            raise TreeError("edge count does not match a tree")
        for u in range(n_nodes):
            deg = len(neighbors[u])
            if taxon[u] >= 0:
                if deg != 1:
                    raise TreeError(f"leaf {u} has degree {deg}")
            elif deg < 2:
                raise TreeError(f"interior node {u} has degree {deg} < 2")
        if rooted:
            if root_id is None:
                root_id = next(
                    u for u in range(n_nodes)
                    if taxon[u] < 0 and len(neighbors[u]) == 2
                )
            if len(neighbors[root_id]) != 2:
                raise TreeError("rooted tree root must have degree 2")
            for u in range(n_nodes):
                if taxon[u] < 0 and u != root_id and len(neighbors[u]) != 3:
                    raise TreeError("non-root interior node of degree != 3")
            if n_nodes != 2 * n_leaves - 1:
                raise TreeError("rooted bifurcating tree must have 2N-1 nodes")
        else:
            for u in range(n_nodes):
                if taxon[u] < 0 and len(neighbors[u]) != 3:
                    raise TreeError(
                        f"unrooted interior node {u} has degree "
                        f"{len(neighbors[u])} != 3"
                    )
            if n_nodes != 2 * n_leaves - 2:
                raise TreeError("unrooted bifurcating tree must have 2N-2 nodes")
            if root_id is None:
                # Designated traversal root: the unique neighbor of taxon 0.
                leaf0 = taxon.index(0)
                root_id = neighbors[leaf0][0]
            if taxon[root_id] >= 0:
                raise TreeError("designated root must be an interior node")

        self.taxa = taxa
        self.neighbors = tuple(tuple(ns) for ns in neighbors)
        self.taxon = tuple(taxon)
        self.rooted = rooted
        self.root_id = root_id
        self.edges = tuple((u, v) if u < v else (v, u) for u, v in edges)
        self.edge_index = {e: i for i, e in enumerate(self.edges)}
        self._traversal_cache: dict[int, TraversalOrder] = {}
        self._splits = None
        self._split_of_edge = None
        self.cache: dict = {}  # scratch for derived per-tree arrays

        # Connectivity: a traversal from root_id must reach every node.
        if len(self.traversal().postorder) != n_nodes:
            raise TreeError("tree is not connected")

    # -- basic queries -------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.neighbors)

    @property
    def n_leaves(self) -> int:
        return len(self.taxa)

    def is_leaf(self, u: int) -> bool:
        return self.taxon[u] >= 0

    def degree(self, u: int) -> int:
        return len(self.neighbors[u])

    def leaf_of_taxon(self, k: int) -> int:
        return self.taxon.index(k)

    def edge_id(self, u: int, v: int) -> int:
        return self.edge_index[(u, v) if u < v else (v, u)]

    @property
    def leaves(self) -> list[int]:
        return [u for u in range(self.n_nodes) if self.taxon[u] >= 0]

    @property
    def interior(self) -> list[int]:
        return [u for u in range(self.n_nodes) if self.taxon[u] < 0]

    # -- traversal -----------------------------------------------------------

    def traversal(self, root: int | None = None) -> TraversalOrder:
        """Postorder/preorder/parent arrays rooted at ``root`` (interior node).

        Child order follows the adjacency-list order, so traversals are
        deterministic for identically constructed trees.
        """
        if root is None:
            root = self.root_id
        if root < 0 or root >= self.n_nodes:
            raise TreeError(f"root id {root} out of range")
        if self.is_leaf(root):
            raise TreeError(f"root id {root} is a leaf")
        cached = self._traversal_cache.get(root)
        if cached is not None:
            return cached

        n = self.n_nodes
        parent = np.full(n, -1, dtype=np.int64)
        preorder = np.empty(n, dtype=np.int64)
        stack = [root]
        visited = np.zeros(n, dtype=bool)
        visited[root] = True
        k = 0
        while stack:
            u = stack.pop()
            preorder[k] = u
            k += 1
            # Reversed push keeps adjacency-list order in the preorder.
            for v in reversed(self.neighbors[u]):
                if not visited[v]:
                    visited[v] = True
                    parent[v] = u
                    stack.append(v)
        preorder = preorder[:k]

        # Postorder: children (in adjacency order) before their parent.
        post = np.empty(k, dtype=np.int64)
        stack2: list[tuple[int, bool]] = [(root, False)]
        j = 0
        while stack2:
            u, done = stack2.pop()
            if done:
                post[j] = u
                j += 1
                continue
            stack2.append((u, True))
            for v in reversed(self.neighbors[u]):
                if parent[v] == u:
                    stack2.append((v, False))
        order = TraversalOrder(postorder=post, preorder=preorder, parent=parent)
        self._traversal_cache[root] = order
        return order

    # -- splits ----------------------------------------------------------------

    def subtree_masks(self, root: int | None = None) -> list[int]:
        """Taxon bitmask of the subtree below every node, for a given rooting.

        Plain Python ints: masks are arbitrary-width (N may exceed 63).
        """
        order = self.traversal(root)
        masks = [0] * self.n_nodes
        for u in order.postorder:
            u = int(u)
            if self.is_leaf(u):
                masks[u] = 1 << self.taxon[u]
            else:
                m = 0
                for v in self.neighbors[u]:
                    if order.parent[v] == u:
                        m |= masks[v]
                masks[u] = m
        return masks

    def split_of_edge(self) -> list[int]:
        """Per-edge-id canonical split bitmask (the side without taxon 0)."""
        if self._split_of_edge is not None:
            return self._split_of_edge
        order = self.traversal()
        masks = self.subtree_masks()
        full = self.taxa.full_mask
        out = [0] * len(self.edges)
        for v in range(self.n_nodes):
            p = int(order.parent[v])
            if p < 0:
                continue
            m = masks[v]
            if m & 1:
                m = full ^ m
            out[self.edge_id(p, v)] = m
        self._split_of_edge = out
        return out

    def splits(self) -> frozenset[int]:
        """Set of canonical split bitmasks; identifies the unrooted topology."""
        if self._splits is None:
            self._splits = frozenset(self.split_of_edge())
        return self._splits


def splits_of(tree: TreeTopology) -> frozenset[int]:
    """Canonical bipartition set of an unrooted tree, one split per edge."""
    if tree.rooted:
        raise TreeError("splits_of expects an unrooted tree; unroot() first")
    return tree.splits()


def split_taxa(mask: int, taxa: TaxaSet) -> frozenset[str]:
    """Taxon names on the canonical side of a split bitmask."""
    return frozenset(
        name for k, name in enumerate(taxa.names) if mask >> k & 1
    )


def traversal(tree: TreeTopology, root: int) -> TraversalOrder:
    return tree.traversal(root)


# ---------------------------------------------------------------------------
# Newick parsing / serialization
# ---------------------------------------------------------------------------

@dataclass
class _ParseNode:
    children: list = field(default_factory=list)
    label: str | None = None
    length: float | None = None


def _tokenize_newick(text: str):
    """Parse into a nested ``_ParseNode`` structure; positions in errors."""
    text = text.strip()
    if not text.endswith(";"):
        raise TreeError("Newick string must end with ';'")
    s = text[:-1]
    i = 0
    n = len(s)

    def fail(msg: str):
        raise TreeError(f"Newick syntax error at position {i}: {msg}")

    def parse_clade() -> _ParseNode:
        nonlocal i
        node = _ParseNode()
        if i < n and s[i] == "(":
            i += 1
            while True:
                node.children.append(parse_clade())
                if i >= n:
                    fail("unterminated '('")
                if s[i] == ",":
                    i += 1
                    continue
                if s[i] == ")":
                    i += 1
                    break
                fail(f"expected ',' or ')', found {s[i]!r}")
        # optional label
        j = i
        while j < n and s[j] not in "(),:;":
            j += 1
        label = s[i:j].strip()
        if label:
            node.label = label
        i = j
        # optional :length
        if i < n and s[i] == ":":
            i += 1
            j = i
            while j < n and s[j] not in "(),:;":
                j += 1
            try:
                node.length = float(s[i:j])
            except ValueError:
                fail(f"bad branch length {s[i:j]!r}")
            i = j
        return node

    root = parse_clade()
    if i != n:
        fail("trailing characters after the root clade")
    if not root.children:
        raise TreeError("Newick string describes a single node, not a tree")
    return root


def parse_newick(text: str, taxa: TaxaSet | None = None,
                 capture_lengths: bool = False):
    """Parse a Newick string into a TreeTopology.

    The top-level clade decides rootedness: two children give a rooted tree,
    three give an unrooted one.  Multifurcations are rejected.  If ``taxa`` is
    not supplied, one is built from the leaf labels in sorted order.  With
    ``capture_lengths`` the return value is ``(tree, lengths)`` where lengths
    is a per-edge-id float vector (NaN where no length was annotated).
    """
    root = _tokenize_newick(text)
    labels: list[str] = []

    def collect(node: _ParseNode):
        if not node.children:
            if node.label is None:
                raise TreeError("leaf without a label")
            labels.append(node.label)
        for ch in node.children:
            collect(ch)

    collect(root)
    if len(set(labels)) != len(labels):
        raise TreeError("duplicate taxon label in Newick input")
    if taxa is None:
        taxa = TaxaSet(sorted(labels))
    for lab in labels:
        if lab not in taxa.index:
            raise TreeError(f"unknown taxon label {lab!r}")
    if set(labels) != set(taxa.names):
        raise TreeError("Newick leaves do not cover the taxon set")

    if len(root.children) == 2:
        rooted = True
    elif len(root.children) == 3:
        rooted = False
    else:
        raise TreeError(
            f"top-level node has {len(root.children)} children; only "
            "bifurcating (2) or unrooted trifurcating (3) roots are accepted"
        )

    edges: list[tuple[int, int]] = []
    leaf_taxon: dict[int, int] = {}
    lengths: dict[tuple[int, int], float] = {}
    counter = [0]

    def build(node: _ParseNode) -> int:
        nid = counter[0]
        counter[0] += 1
        if not node.children:
            leaf_taxon[nid] = taxa.index[node.label]
            return nid
        if len(node.children) != 2 and node is not root:
            raise TreeError("multifurcating interior node (not supported)")
        for ch in node.children:
            cid = build(ch)
            e = (nid, cid) if nid < cid else (cid, nid)
            edges.append(e)
            if ch.length is not None:
                lengths[e] = ch.length
        return nid

    root_id = build(root)
    tree = TreeTopology(taxa, edges, leaf_taxon, rooted=rooted,
                        root_id=root_id if not rooted else root_id)
    if not capture_lengths:
        return tree
    q = np.full(len(tree.edges), np.nan)
    for e, x in lengths.items():
        q[tree.edge_index[e]] = x
    return tree, q


def serialize_newick(tree: TreeTopology,
                     lengths: np.ndarray | None = None) -> str:
    """Canonical Newick text: children ordered by smallest taxon index below.

    Round-trips through parse_newick to an isomorphic tree; equal canonical
    strings <=> equal topologies (same rootedness and taxa).
    """
    order = tree.traversal()
    parent = order.parent
    min_taxon = np.full(tree.n_nodes, tree.n_leaves, dtype=np.int64)
    for u in order.postorder:
        u = int(u)
        if tree.is_leaf(u):
            min_taxon[u] = tree.taxon[u]
        else:
            for v in tree.neighbors[u]:
                if parent[v] == u:
                    min_taxon[u] = min(min_taxon[u], min_taxon[v])

    def length_suffix(child: int) -> str:
        if lengths is None:
            return ""
        q = lengths[tree.edge_id(int(parent[child]), child)]
        return f":{q:.12g}"

    # Iterative emit keeps deep caterpillars safe from recursion limits.
    parts: dict[int, str] = {}
    for u in order.postorder:
        u = int(u)
        if tree.is_leaf(u):
            parts[u] = tree.taxa.names[tree.taxon[u]]
        else:
            kids = sorted(
                (v for v in tree.neighbors[u] if parent[v] == u),
                key=lambda v: int(min_taxon[v]),
            )
            inner = ",".join(parts[v] + length_suffix(v) for v in kids)
            parts[u] = f"({inner})"
    return parts[tree.root_id] + ";"


# ---------------------------------------------------------------------------
# Construction helpers
# ---------------------------------------------------------------------------

def tree_from_edges(taxa: TaxaSet, edges, leaf_taxon: dict,
                    rooted: bool = False) -> TreeTopology:
    return TreeTopology(taxa, edges, leaf_taxon, rooted=rooted)


def unroot(tree: TreeTopology) -> TreeTopology:
    """Suppress a rooted tree's degree-2 root, merging its two edges."""
    if not tree.rooted:
        return tree
    r = tree.root_id
    a, b = tree.neighbors[r]
    edges = [e for e in tree.edges if r not in e]
    edges.append((a, b) if a < b else (b, a))
    # Compact node ids to keep the arena dense.
    keep = [u for u in range(tree.n_nodes) if u != r]
    remap = {u: i for i, u in enumerate(keep)}
    edges = [(remap[u], remap[v]) for u, v in edges]
    leaf_taxon = {remap[u]: tree.taxon[u] for u in keep if tree.taxon[u] >= 0}
    return TreeTopology(tree.taxa, edges, leaf_taxon, rooted=False)


def root_on_edge(tree: TreeTopology, edge_id: int) -> TreeTopology:
    """Insert a degree-2 root in the middle of one edge of an unrooted tree."""
    if tree.rooted:
        raise TreeError("tree is already rooted")
    u, v = tree.edges[edge_id]
    r = tree.n_nodes
    edges = [e for i, e in enumerate(tree.edges) if i != edge_id]
    edges.extend([(u, r), (v, r)])
    leaf_taxon = {w: tree.taxon[w] for w in range(tree.n_nodes)
                  if tree.taxon[w] >= 0}
    return TreeTopology(tree.taxa, edges, leaf_taxon, rooted=True, root_id=r)


def enumerate_unrooted(taxa: TaxaSet):
    """Yield every unrooted bifurcating topology on ``taxa`` exactly once.

    Stepwise insertion: taxon k+1 is grafted onto each edge of each k-taxon
    tree, which visits each topology once; the count is (2N-5)!!.
    Guarded to N <= 10 against combinatorial blowup.
    """
    n = len(taxa)
    if not 3 <= n <= 10:
        raise TreeError(f"enumeration supported for 3 <= N <= 10, got {n}")

    # Leaf ids are the taxon indices; interior ids start at n.
    base = [(0, n), (1, n), (2, n)]

    def grow(edges: list, k: int):
        if k == n:
            yield edges
            return
        w = n + k - 2  # next interior id
        for i in range(len(edges)):
            u, v = edges[i]
            new_edges = edges[:i] + edges[i + 1:] + [(u, w), (w, v), (k, w)]
            yield from grow(new_edges, k + 1)

    leaf_taxon = {k: k for k in range(n)}
    for edges in grow(base, 3):
        yield TreeTopology(taxa, edges, dict(leaf_taxon), rooted=False)


def random_unrooted(taxa: TaxaSet, rng: np.random.Generator) -> TreeTopology:
    """Uniform random unrooted bifurcating topology via random stepwise insertion."""
    n = len(taxa)
    if n < 3:
        raise TreeError("need at least 3 taxa")
    edges = [(0, n), (1, n), (2, n)]
    for k in range(3, n):
        w = n + k - 2
        i = int(rng.integers(len(edges)))
        u, v = edges.pop(i)
        edges.extend([(u, w), (w, v), (k, w)])
    leaf_taxon = {k: k for k in range(n)}
    return TreeTopology(taxa, edges, leaf_taxon, rooted=False)

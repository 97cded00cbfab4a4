"""Subsplit Bayesian networks over tree topologies.

A rooted tree decomposes uniquely into a root subsplit plus one parent-child
subsplit pair per interior splitting event; unrooted probabilities marginalize
over the 2N-3 edge rootings.  Clades are taxon bitmasks; a subsplit is an
ordered pair ``(w, z)`` of disjoint clades with ``w < z`` numerically.

Conditional probability tables use the simplest SBN structure (full binary):
one softmax over all supported root subsplits, and one softmax per
(parent subsplit, clade being split) group of supported children.
"""

from __future__ import annotations

import json

import numpy as np

from .trees import TaxaSet, TreeError, TreeTopology, tree_from_edges, unroot


class SupportError(ValueError):
    """Tree (or one of its events) falls outside the CPT support."""


def subsplit(a: int, b: int) -> tuple[int, int]:
    if a & b:
        raise ValueError("subsplit clades must be disjoint")
    if a == 0 or b == 0:
        raise ValueError("subsplit clades must be non-empty")
    return (a, b) if a < b else (b, a)


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def _directed_masks(tree: TreeTopology) -> dict[tuple[int, int], int]:
    """dir_masks[(u, v)] = taxa in the component of v once edge (u, v) is cut."""
    order = tree.traversal()
    masks = tree.subtree_masks()
    full = tree.taxa.full_mask
    out: dict[tuple[int, int], int] = {}
    for v in range(tree.n_nodes):
        p = int(order.parent[v])
        if p < 0:
            continue
        out[(p, v)] = int(masks[v])
        out[(v, p)] = full ^ int(masks[v])
    return out


def rooted_decomposition(tree: TreeTopology):
    """Preorder list of (parent subsplit or None, child subsplit) events."""
    if not tree.rooted:
        raise TreeError("rooted_decomposition expects a rooted tree")
    order = tree.traversal()
    masks = tree.subtree_masks()
    events = []
    node_subsplit: dict[int, tuple[int, int]] = {}
    for u in order.preorder:
        u = int(u)
        if tree.is_leaf(u):
            continue
        kids = [v for v in tree.neighbors[u] if order.parent[v] == u]
        s = subsplit(int(masks[kids[0]]), int(masks[kids[1]]))
        node_subsplit[u] = s
        p = int(order.parent[u])
        events.append((node_subsplit[p] if p >= 0 else None, s))
    return events


def rebuild_rooted(taxa: TaxaSet, events) -> TreeTopology:
    """Inverse of rooted_decomposition: rebuild the rooted tree from events."""
    children = {}
    root_sub = None
    for parent, child in events:
        if parent is None:
            root_sub = child
        w, z = child
        children[w | z] = child
    if root_sub is None:
        raise ValueError("events carry no root subsplit")

    edges = []
    counter = [len(taxa)]

    def build(clade: int) -> int:
        if popcount(clade) == 1:
            return clade.bit_length() - 1  # leaf id = taxon index
        nid = counter[0]
        counter[0] += 1
        w, z = children[clade]
        for part in (w, z):
            edges.append((nid, build(part)))
        return nid

    root_id = counter[0]
    counter[0] += 1
    w, z = root_sub
    edges.append((root_id, build(w)))
    edges.append((root_id, build(z)))
    leaf_taxon = {k: k for k in range(len(taxa))}
    return tree_from_edges(taxa, edges, leaf_taxon, rooted=True)


def _tree_rooting_events(tree: TreeTopology):
    """For each edge id of an unrooted tree, the decomposition of the tree
    rooted on that edge: (root subsplit, [(parent subsplit, child subsplit)])."""
    dir_masks = _directed_masks(tree)
    out = []
    for u, v in tree.edges:
        root_sub = subsplit(dir_masks[(u, v)], dir_masks[(v, u)])
        events = []
        # Walk away from the root edge from both endpoints.
        stack = [(v, u, root_sub), (u, v, root_sub)]
        while stack:
            node, came_from, parent_sub = stack.pop()
            if tree.is_leaf(node):
                continue
            rest = [w for w in tree.neighbors[node] if w != came_from]
            s = subsplit(dir_masks[(node, rest[0])], dir_masks[(node, rest[1])])
            events.append((parent_sub, s))
            stack.append((rest[0], node, s))
            stack.append((rest[1], node, s))
        out.append((root_sub, events))
    return out


def tree_psps(tree: TreeTopology):
    """Per edge id: (canonical split mask, tuple of adjacent subsplits).

    The adjacent subsplits of an edge are how its two endpoint nodes split
    their own sides further; a leaf endpoint contributes none.
    """
    dir_masks = _directed_masks(tree)
    split_of = tree.split_of_edge()
    out = []
    for eid, (u, v) in enumerate(tree.edges):
        adj = []
        for node, other in ((u, v), (v, u)):
            if tree.is_leaf(node):
                continue
            rest = [w for w in tree.neighbors[node] if w != other]
            adj.append(subsplit(dir_masks[(node, rest[0])],
                                dir_masks[(node, rest[1])]))
        out.append((split_of[eid], tuple(adj)))
    return out


class SbnSupport:
    """Supported root subsplits, parent-child groups, splits and PSPs.

    phi layout: group 0 is the root softmax over root subsplits; every
    (parent subsplit, clade) pair with supported children gets its own
    contiguous block.  All orderings are sorted, so the layout is a pure
    function of the support contents.
    """

    def __init__(self, taxa: TaxaSet, root_subsplits, pc_pairs, splits, psps):
        self.taxa = taxa
        self.root_subsplits = tuple(sorted(root_subsplits))
        self.root_index = {s: i for i, s in enumerate(self.root_subsplits)}

        by_group: dict[tuple, set] = {}
        for parent, child in pc_pairs:
            clade = child[0] | child[1]
            by_group.setdefault((parent, clade), set()).add(child)
        self.group_keys = [None] + sorted(by_group)  # gid 0 = root group
        self.group_children = [self.root_subsplits] + [
            tuple(sorted(by_group[k])) for k in self.group_keys[1:]
        ]
        self.group_of = {k: gid for gid, k in enumerate(self.group_keys)}
        sizes = [len(ch) for ch in self.group_children]
        self.group_offset = np.zeros(len(sizes) + 1, dtype=np.int64)
        np.cumsum(sizes, out=self.group_offset[1:])
        self.child_pos = {}
        for gid, ch in enumerate(self.group_children):
            for i, s in enumerate(ch):
                self.child_pos[(gid, s)] = i

        self.splits = tuple(sorted(splits))
        self.split_index = {m: i for i, m in enumerate(self.splits)}
        self.psps = tuple(sorted(psps))
        self.psp_index = {p: i for i, p in enumerate(self.psps)}

    @property
    def n_params(self) -> int:
        return int(self.group_offset[-1])

    @property
    def n_groups(self) -> int:
        return len(self.group_children)

    def group_slice(self, gid: int) -> slice:
        return slice(int(self.group_offset[gid]), int(self.group_offset[gid + 1]))

    def param_index(self, gid: int, child) -> int:
        return int(self.group_offset[gid]) + self.child_pos[(gid, child)]


def build_support(trees) -> SbnSupport:
    """Collect root subsplits and parent-child pairs over every rooting of
    every input tree, plus the split and PSP sets for branch parameterization."""
    trees = list(trees)
    if not trees:
        raise ValueError("support needs at least one tree")
    taxa = trees[0].taxa
    root_subsplits = set()
    pc_pairs = set()
    splits = set()
    psps = set()
    for tree in trees:
        if tree.rooted:
            tree = unroot(tree)
        if tree.taxa != taxa:
            raise TreeError("all support trees must share one taxa set")
        for root_sub, events in _tree_rooting_events(tree):
            root_subsplits.add(root_sub)
            pc_pairs.update(events)
        for split_mask, adjacent in tree_psps(tree):
            splits.add(split_mask)
            for s in adjacent:
                psps.add((split_mask, s))
    return SbnSupport(taxa, root_subsplits, pc_pairs, splits, psps)


class SbnModel:
    """SBN support plus CPT parameters (softmax logits per group)."""

    def __init__(self, support: SbnSupport, phi: np.ndarray | None = None):
        self.support = support
        if phi is None:
            phi = np.zeros(support.n_params)
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (support.n_params,):
            raise ValueError("phi length does not match the support")
        self.phi = phi
        self._events_cache: dict[frozenset, list] = {}

    # -- indexing ----------------------------------------------------------

    def _indexed_rootings(self, tree: TreeTopology):
        """Per rooting: list of (gid, param index) or None if unsupported."""
        key = tree.splits()
        cached = self._events_cache.get(key)
        if cached is not None:
            return cached
        sup = self.support
        indexed = []
        for root_sub, events in _tree_rooting_events(tree):
            ri = sup.root_index.get(root_sub)
            if ri is None:
                indexed.append(None)
                continue
            idx = [(0, int(sup.group_offset[0]) + ri)]
            ok = True
            for parent, child in events:
                gid = sup.group_of.get((parent, child[0] | child[1]))
                if gid is None or (gid, child) not in sup.child_pos:
                    ok = False
                    break
                idx.append((gid, sup.param_index(gid, child)))
            indexed.append(idx if ok else None)
        self._events_cache[key] = indexed
        return indexed

    def group_log_norms(self) -> np.ndarray:
        sup = self.support
        out = np.empty(sup.n_groups)
        for gid in range(sup.n_groups):
            block = self.phi[sup.group_slice(gid)]
            m = block.max()
            out[gid] = m + np.log(np.sum(np.exp(block - m)))
        return out

    # -- probabilities -------------------------------------------------------

    def log_prob_rooted(self, tree: TreeTopology,
                        log_norms: np.ndarray | None = None) -> float:
        if log_norms is None:
            log_norms = self.group_log_norms()
        sup = self.support
        events = rooted_decomposition(tree)
        total = 0.0
        for parent, child in events:
            if parent is None:
                gid = 0
                if child not in sup.root_index:
                    raise SupportError(f"root subsplit {child} not in support")
            else:
                gid = sup.group_of.get((parent, child[0] | child[1]))
                if gid is None or (gid, child) not in sup.child_pos:
                    raise SupportError("parent-child pair not in support")
            total += self.phi[sup.param_index(gid, child)] - log_norms[gid]
        return total

    def _rooting_log_probs(self, tree, log_norms):
        indexed = self._indexed_rootings(tree)
        lps = np.full(len(indexed), -np.inf)
        for r, idx in enumerate(indexed):
            if idx is None:
                continue
            lps[r] = sum(self.phi[i] - log_norms[g] for g, i in idx)
        return lps, indexed

    def log_prob_unrooted(self, tree: TreeTopology,
                          log_norms: np.ndarray | None = None) -> float:
        """log of the rooted-probability sum over all 2N-3 edge rootings."""
        if tree.rooted:
            raise TreeError("log_prob_unrooted expects an unrooted tree")
        if log_norms is None:
            log_norms = self.group_log_norms()
        lps, _ = self._rooting_log_probs(tree, log_norms)
        m = lps.max()
        if not np.isfinite(m):
            raise SupportError("no rooting of the tree lies in the support")
        return float(m + np.log(np.sum(np.exp(lps - m))))

    def log_prob_grad_phi(self, tree: TreeTopology,
                          log_norms: np.ndarray | None = None):
        """(log prob, exact gradient in phi) for an unrooted tree."""
        if log_norms is None:
            log_norms = self.group_log_norms()
        sup = self.support
        lps, indexed = self._rooting_log_probs(tree, log_norms)
        m = lps.max()
        if not np.isfinite(m):
            raise SupportError("no rooting of the tree lies in the support")
        total = m + np.log(np.sum(np.exp(lps - m)))
        w = np.exp(lps - total)

        grad = np.zeros_like(self.phi)
        group_w = np.zeros(sup.n_groups)
        for r, idx in enumerate(indexed):
            if idx is None or w[r] == 0.0:
                continue
            for gid, i in idx:
                grad[i] += w[r]
                group_w[gid] += w[r]
        for gid in np.nonzero(group_w)[0]:
            sl = sup.group_slice(int(gid))
            block = self.phi[sl]
            grad[sl] -= group_w[gid] * np.exp(block - log_norms[gid])
        return float(total), grad

    # -- sampling --------------------------------------------------------------

    def sample_rooted(self, rng: np.random.Generator) -> TreeTopology:
        sup = self.support
        log_norms = self.group_log_norms()

        def draw(gid: int):
            sl = sup.group_slice(gid)
            p = np.exp(self.phi[sl] - log_norms[gid])
            i = int(rng.choice(len(p), p=p / p.sum()))
            return sup.group_children[gid][i]

        events = []
        s1 = draw(0)
        events.append((None, s1))
        stack = [(s1, s1[0]), (s1, s1[1])]
        while stack:
            parent, clade = stack.pop()
            if popcount(clade) < 2:
                continue
            gid = sup.group_of.get((parent, clade))
            if gid is None:
                raise SupportError(
                    f"support is not sampling-closed at clade {clade:#x}"
                )
            s = draw(gid)
            events.append((parent, s))
            stack.append((s, s[0]))
            stack.append((s, s[1]))
        return rebuild_rooted(sup.taxa, events)

    def sample_tree(self, rng: np.random.Generator) -> TreeTopology:
        """Ancestral sampling of an unrooted topology."""
        return unroot(self.sample_rooted(rng))

    # -- persistence -----------------------------------------------------------

    def to_json(self) -> str:
        sup = self.support

        def hexpair(s):
            return [format(s[0], "x"), format(s[1], "x")]

        pc = []
        for key in sup.group_keys[1:]:
            parent, _clade = key
            gid = sup.group_of[key]
            for child in sup.group_children[gid]:
                pc.append(hexpair(parent) + hexpair(child))
        return json.dumps({
            "taxa": list(sup.taxa.names),
            "root_subsplits": [hexpair(s) for s in sup.root_subsplits],
            "parent_child": pc,
            "splits": [format(m, "x") for m in sup.splits],
            "psps": [[format(m, "x")] + hexpair(s) for m, s in sup.psps],
            "phi": self.phi.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "SbnModel":
        obj = json.loads(text)
        taxa = TaxaSet(obj["taxa"])
        root = {(int(a, 16), int(b, 16)) for a, b in obj["root_subsplits"]}
        pc = {((int(a, 16), int(b, 16)), (int(c, 16), int(d, 16)))
              for a, b, c, d in obj["parent_child"]}
        splits = {int(m, 16) for m in obj["splits"]}
        psps = {(int(m, 16), (int(a, 16), int(b, 16)))
                for m, a, b in obj["psps"]}
        support = SbnSupport(taxa, root, pc, splits, psps)
        return cls(support, np.asarray(obj["phi"], dtype=np.float64))

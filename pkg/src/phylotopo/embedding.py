"""Interior node embedding by Dirichlet energy minimization.

Features are node-id-indexed ``(n_nodes, d)`` float64 arrays; leaf rows hold
the fixed tip features, interior rows are solved so every interior node's
feature equals the mean of its neighbors' features (the first-order condition
of the energy).  ``embed_two_pass`` is the linear-time solver;
``embed_dense`` solves the same system by direct factorization and serves as
its oracle.  ``reconstruct_topology`` inverts the embedding back to the
unique topology that produced it.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .trees import TaxaSet, TreeError, TreeTopology


class EmbeddingError(ValueError):
    """Invalid feature input (shape mismatch, non-finite, not an embedding)."""


def one_hot_tips(tree: TreeTopology, taxa: TaxaSet | None = None) -> np.ndarray:
    """(n_nodes, N) array with the k-th basis vector on the leaf of taxon k."""
    if taxa is None:
        taxa = tree.taxa
    if taxa != tree.taxa:
        raise EmbeddingError("taxa set does not match the tree")
    n = len(taxa)
    tips = np.zeros((tree.n_nodes, n))
    for u in range(tree.n_nodes):
        k = tree.taxon[u]
        if k >= 0:
            tips[u, k] = 1.0
    return tips


def _solver_arrays(tree: TreeTopology):
    cached = tree.cache.get("solver_arrays")
    if cached is None:
        n = tree.n_nodes
        deg = np.array([tree.degree(u) for u in range(n)], dtype=np.float64)
        leaf = np.array([tree.is_leaf(u) for u in range(n)])
        leaf_idx = np.flatnonzero(leaf)
        cached = (deg, leaf, leaf_idx)
        tree.cache["solver_arrays"] = cached
    return cached


def _check_tips(tree: TreeTopology, tips: np.ndarray,
                leaf_idx: np.ndarray) -> np.ndarray:
    tips = np.asarray(tips, dtype=np.float64)
    if tips.ndim != 2 or tips.shape[0] != tree.n_nodes:
        raise EmbeddingError(
            f"tips must be (n_nodes, d) = ({tree.n_nodes}, d), got {tips.shape}"
        )
    if not np.all(np.isfinite(tips[leaf_idx])):
        raise EmbeddingError("non-finite tip feature")
    return tips


def embed_two_pass(tree: TreeTopology, tips: np.ndarray,
                   return_coefficients: bool = False):
    """Linear-time two-pass minimizer of the Dirichlet energy.

    Postorder pass: each non-root node u is expressed as
    ``x_u = c_u * x_parent + d_u`` with ``c_u = 1 / (deg(u) - sum of child
    c)``; preorder pass back-substitutes from the root.  Works for any tree
    with given tip features, not just bifurcating ones.

    Returns the full (n_nodes, d) feature array, leaf rows unchanged.  With
    ``return_coefficients`` also returns ``(c, d_vec)`` from the first pass
    (c is 0 on leaves and unset on the root).
    """
    deg, leaf, leaf_idx = _solver_arrays(tree)
    tips = _check_tips(tree, tips, leaf_idx)
    order = tree.traversal()
    n, d = tips.shape
    c = np.zeros(n)
    dv = np.zeros((n, d))
    out = np.empty((n, d))
    kernels.two_pass(order.postorder, order.preorder, order.parent,
                     deg, leaf, tips, c, dv, out)
    if return_coefficients:
        return out, c, dv
    return out


def embed_dense(tree: TreeTopology, tips: np.ndarray) -> np.ndarray:
    """Dense-solve oracle: the interior-restricted graph-Laplacian system.

    Builds deg(u) x_u - sum_{v in N(u), v interior} x_v = sum of adjacent tip
    features and factorizes it directly.  Quadratic/cubic cost; intended as
    the independent check of ``embed_two_pass`` at moderate size.
    """
    tips = _check_tips(tree, tips, _solver_arrays(tree)[2])
    interior = tree.interior
    if len(interior) > 2000:
        raise EmbeddingError("dense solve limited to <= 2000 interior nodes")
    pos = {u: i for i, u in enumerate(interior)}
    m = len(interior)
    A = np.zeros((m, m))
    b = np.zeros((m, tips.shape[1]))
    for u in interior:
        i = pos[u]
        A[i, i] = tree.degree(u)
        for v in tree.neighbors[u]:
            if tree.is_leaf(v):
                b[i] += tips[v]
            else:
                A[i, pos[v]] -= 1.0
    sol = np.linalg.solve(A, b)
    out = tips.copy()
    for u in interior:
        out[u] = sol[pos[u]]
    return out


def dirichlet_energy(tree: TreeTopology, feats: np.ndarray) -> float:
    """Sum over edges of squared feature differences."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[0] != tree.n_nodes:
        raise EmbeddingError("feature row missing for some node")
    e = np.asarray(tree.edges)
    diff = feats[e[:, 0]] - feats[e[:, 1]]
    return float(np.sum(diff * diff))


def balance_residual(tree: TreeTopology, feats: np.ndarray) -> float:
    """Max-abs violation of the interior mean-of-neighbors condition."""
    worst = 0.0
    for u in tree.interior:
        mean = np.mean([feats[v] for v in tree.neighbors[u]], axis=0)
        worst = max(worst, float(np.max(np.abs(feats[u] - mean))))
    return worst


class ReconstructionError(ValueError):
    """Features are not a valid embedding: no cherry or ambiguous argmax."""


def reconstruct_topology(interior_feats: np.ndarray, tips: np.ndarray,
                         taxa: TaxaSet, rel_tol: float = 1e-6) -> TreeTopology:
    """Recover the unique unrooted topology whose embedding matches the input.

    ``tips`` is (N, d) in taxon order (linearly independent rows);
    ``interior_feats`` is (N-2, d), one row per interior node of the unknown
    topology, in any order.  Inductive procedure: write each interior feature
    as a combination of the current tip features; each tip's neighbor is the
    interior node with the largest coefficient; two tips sharing a neighbor
    form a cherry and are merged into it (its embedded feature becomes the
    new tip feature) until three tips remain.

    Argmax ties within ``rel_tol`` relative raise ReconstructionError rather
    than guessing: exact embeddings have a strict maximizer, so near-ties
    mean the input is not an embedding.
    """
    tips = np.asarray(tips, dtype=np.float64)
    interior_feats = np.asarray(interior_feats, dtype=np.float64)
    n = len(taxa)
    if tips.shape[0] != n:
        raise EmbeddingError(f"expected {n} tip rows, got {tips.shape[0]}")
    if interior_feats.shape != (n - 2, tips.shape[1]):
        raise EmbeddingError(
            f"expected ({n - 2}, {tips.shape[1]}) interior rows, "
            f"got {interior_feats.shape}"
        )

    # Output node ids: taxa 0..N-1, interior rows N..2N-3.
    cur_tips: list[tuple[int, np.ndarray]] = [(k, tips[k]) for k in range(n)]
    pool: list[tuple[int, np.ndarray]] = [
        (n + i, interior_feats[i]) for i in range(n - 2)
    ]
    edges: list[tuple[int, int]] = []

    while len(cur_tips) > 3:
        T = np.stack([f for _, f in cur_tips], axis=1)          # (d, t)
        X = np.stack([f for _, f in pool], axis=1)              # (d, m)
        coef, *_ = np.linalg.lstsq(T, X, rcond=None)            # (t, m)

        owner: dict[int, list[int]] = {}
        for j in range(len(cur_tips)):
            row = coef[j]
            best = int(np.argmax(row))
            if len(row) > 1:
                second = float(np.partition(row, -2)[-2])
                gap = float(row[best]) - second
                if gap <= rel_tol * max(abs(float(row[best])), 1e-300):
                    raise ReconstructionError(
                        f"ambiguous neighbor argmax for tip {cur_tips[j][0]}"
                    )
            owner.setdefault(best, []).append(j)

        merges = []
        for best, tip_idxs in owner.items():
            if len(tip_idxs) == 2:
                merges.append((best, tip_idxs))
            elif len(tip_idxs) > 2:
                raise ReconstructionError(
                    "three tips claim the same interior neighbor"
                )
        if not merges:
            raise ReconstructionError("no cherry found")
        # Never merge below the 3-tip base case (4 tips hold two cherries).
        merges.sort(key=lambda m: m[0])
        merges = merges[: len(cur_tips) - 3]

        drop_tips: set[int] = set()
        drop_pool: set[int] = set()
        new_tips: list[tuple[int, np.ndarray]] = []
        for best, (j1, j2) in merges:
            node_id, feat = pool[best]
            edges.append((cur_tips[j1][0], node_id))
            edges.append((cur_tips[j2][0], node_id))
            drop_tips.update((j1, j2))
            drop_pool.add(best)
            new_tips.append((node_id, feat))
        cur_tips = [t for j, t in enumerate(cur_tips)
                    if j not in drop_tips] + new_tips
        pool = [x for i, x in enumerate(pool) if i not in drop_pool]

    if len(pool) != 1:
        raise ReconstructionError("leftover interior nodes after merging")
    center = pool[0][0]
    for node_id, _ in cur_tips:
        edges.append((node_id, center))

    try:
        return TreeTopology(taxa, edges, {k: k for k in range(n)},
                            rooted=False)
    except TreeError as exc:
        raise ReconstructionError(f"merged edges do not form a tree: {exc}")


def embedding_by_node_kind(tree: TreeTopology, feats: np.ndarray):
    """Split a full feature array into (interior rows, tip rows in taxon order)."""
    tip_rows = np.empty((tree.n_leaves, feats.shape[1]))
    for u in range(tree.n_nodes):
        k = tree.taxon[u]
        if k >= 0:
            tip_rows[k] = feats[u]
    interior_rows = feats[tree.interior]
    return interior_rows, tip_rows

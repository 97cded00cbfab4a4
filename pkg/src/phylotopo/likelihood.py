"""Sequence data, Jukes-Cantor substitution model, pruning likelihood and prior.

The likelihood of an alignment under a tree ``(topology, branch lengths)`` is
the product over sites of the sum over internal-state extensions, computed by
the pruning recursion with per-node rescaling.  Branch lengths are expected
substitutions per site (rate-normalized Jukes-Cantor).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .trees import TaxaSet, TreeError, TreeTopology, double_factorial

# State bitmasks over (A, C, G, T); ambiguity codes allow every compatible
# state (IUPAC), gaps allow all four.
_CHAR_MASK = {
    "A": 1, "C": 2, "G": 4, "T": 8, "U": 8,
    "R": 1 | 4, "Y": 2 | 8, "S": 2 | 4, "W": 1 | 8, "K": 4 | 8, "M": 1 | 2,
    "B": 2 | 4 | 8, "D": 1 | 4 | 8, "H": 1 | 2 | 8, "V": 1 | 2 | 4,
    "N": 15, "-": 15, "?": 15, ".": 15, "X": 15,
}

STATIONARY = np.full(4, 0.25)


class AlignmentError(ValueError):
    pass


class LikelihoodError(ValueError):
    """Raised when the likelihood is exactly zero (incompatible data at q=0)."""


@dataclass(frozen=True)
class Alignment:
    """N x M character matrix, rows ordered like the TaxaSet."""

    taxa: TaxaSet
    codes: np.ndarray  # (N, M) uint8 state bitmasks

    @property
    def n_sites(self) -> int:
        return self.codes.shape[1]

    def patterns(self):
        """Unique site columns and their counts (pattern compression)."""
        cached = self.__dict__.get("_patterns")
        if cached is None:
            cols, counts = np.unique(self.codes, axis=1, return_counts=True)
            cached = (cols, counts.astype(np.float64))
            self.__dict__["_patterns"] = cached
        return cached


def encode_sequences(taxa: TaxaSet, seqs: dict[str, str]) -> Alignment:
    lengths = {len(s) for s in seqs.values()}
    if len(lengths) != 1:
        raise AlignmentError("sequences have unequal lengths")
    m = lengths.pop()
    if m == 0:
        raise AlignmentError("empty sequences")
    codes = np.zeros((len(taxa), m), dtype=np.uint8)
    for name, seq in seqs.items():
        row = taxa.index[name]
        for j, ch in enumerate(seq.upper()):
            mask = _CHAR_MASK.get(ch)
            if mask is None:
                raise AlignmentError(f"invalid character {ch!r} in {name}")
            codes[row, j] = mask
    return Alignment(taxa=taxa, codes=codes)


def parse_fasta(text: str) -> Alignment:
    """FASTA with unique headers; taxa sorted by header name."""
    seqs: dict[str, list[str]] = {}
    name = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            name = line[1:].strip().split()[0]
            if not name:
                raise AlignmentError("empty FASTA header")
            if name in seqs:
                raise AlignmentError(f"duplicate FASTA header {name!r}")
            seqs[name] = []
        else:
            if name is None:
                raise AlignmentError("sequence data before any header")
            seqs[name].append(line)
    if not seqs:
        raise AlignmentError("empty FASTA input")
    taxa = TaxaSet(sorted(seqs))
    return encode_sequences(taxa, {k: "".join(v) for k, v in seqs.items()})


def write_fasta(aln: Alignment) -> str:
    chars = {1: "A", 2: "C", 4: "G", 8: "T", 15: "N"}
    lines = []
    for k, name in enumerate(aln.taxa.names):
        lines.append(f">{name}")
        lines.append("".join(chars.get(int(c), "N") for c in aln.codes[k]))
    return "\n".join(lines) + "\n"


# -- Jukes-Cantor ------------------------------------------------------------

def transition_matrix(t: float) -> np.ndarray:
    """JC transition probabilities at branch length t (substitutions/site)."""
    if t < 0:
        raise ValueError(f"negative branch length {t}")
    e = np.exp(-4.0 * t / 3.0)
    off = 0.25 - 0.25 * e
    P = np.full((4, 4), off)
    np.fill_diagonal(P, 0.25 + 0.75 * e)
    return P


def transition_matrix_derivative(t: float) -> np.ndarray:
    e = np.exp(-4.0 * t / 3.0)
    dP = np.full((4, 4), e / 3.0)
    np.fill_diagonal(dP, -e)
    return dP


def _transition_stack(q: np.ndarray, deriv: bool = False) -> np.ndarray:
    e = np.exp(-4.0 * q / 3.0)
    out = np.empty((len(q), 4, 4))
    if deriv:
        out[:] = (e / 3.0)[:, None, None]
        diag = -e
    else:
        out[:] = (0.25 - 0.25 * e)[:, None, None]
        diag = 0.25 + 0.75 * e
    idx = np.arange(4)
    out[:, idx, idx] = diag[:, None]
    return out


# -- pruning -----------------------------------------------------------------

def _tip_partials(tree: TreeTopology, cols: np.ndarray) -> np.ndarray:
    """(n_nodes, n_patterns, 4) indicator partials on leaf rows."""
    npat = cols.shape[1]
    tips = np.zeros((tree.n_nodes, npat, 4))
    bits = np.array([1, 2, 4, 8], dtype=np.uint8)
    for u in range(tree.n_nodes):
        k = tree.taxon[u]
        if k >= 0:
            tips[u] = (cols[k][:, None] & bits[None, :]) > 0
    return tips


def _pruning_arrays(tree: TreeTopology):
    cached = tree.cache.get("pruning_arrays")
    if cached is not None:
        return cached
    order = tree.traversal()
    parent = order.parent
    n = tree.n_nodes
    counts = np.zeros(n, dtype=np.int64)
    for v in range(n):
        if parent[v] >= 0:
            counts[parent[v]] += 1
    child_off = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=child_off[1:])
    child_list = np.empty(n - 1, dtype=np.int64)
    fill = child_off[:-1].copy()
    for v in order.preorder[1:]:
        p = parent[v]
        child_list[fill[p]] = v
        fill[p] += 1
    leaf = np.array([tree.is_leaf(u) for u in range(n)])
    # edge id of the edge above each node, in rooted orientation
    edge_of_node = np.full(n, -1, dtype=np.int64)
    for v in range(n):
        if parent[v] >= 0:
            edge_of_node[v] = tree.edge_id(int(parent[v]), v)
    out = (order, child_off, child_list, leaf, edge_of_node)
    tree.cache["pruning_arrays"] = out
    return out


def _run_pruning(tree: TreeTopology, q: np.ndarray, Y: Alignment,
                 want_grad: bool):
    if Y.taxa != tree.taxa:
        raise AlignmentError("alignment taxa do not match the tree")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (len(tree.edges),):
        raise ValueError(
            f"branch length vector must have {len(tree.edges)} entries, "
            f"got {q.shape}"
        )
    if np.any(q < 0) or not np.all(np.isfinite(q)):
        raise ValueError("branch lengths must be finite and non-negative")

    order, child_off, child_list, leaf, edge_of_node = _pruning_arrays(tree)
    parent = order.parent
    n = tree.n_nodes
    # single-slot cache holding a strong reference to the alignment it was
    # built for (ids of dead objects get reused, so identity must be checked)
    cached = tree.cache.get("tip_partials")
    if cached is not None and cached[0] is Y:
        _, tips, counts = cached
    else:
        cols, counts = Y.patterns()
        tips = _tip_partials(tree, cols)
        tree.cache["tip_partials"] = (Y, tips, counts)

    # per-node transition matrices for the edge to the parent
    q_node = np.where(edge_of_node >= 0, q[edge_of_node], 0.0)
    pmats = _transition_stack(q_node)
    dpmats = _transition_stack(q_node, deriv=True)

    npat = tips.shape[1]
    partials = np.empty((n, npat, 4))
    down = np.empty((n, npat, 4))
    up = np.empty((n, npat, 4)) if want_grad else np.empty((1, npat, 4))
    grad_node = np.zeros(n)
    loglik, ok = kernels.pruning(
        order.postorder, order.preorder, parent, leaf, child_off, child_list,
        pmats, dpmats, tips, counts, STATIONARY, want_grad,
        partials, down, up, grad_node,
    )
    if not ok:
        raise LikelihoodError(
            "zero site likelihood (incompatible characters at zero distance)"
        )
    if not want_grad:
        return float(loglik), None
    grad = np.zeros(len(tree.edges))
    mask = edge_of_node >= 0
    grad[edge_of_node[mask]] = grad_node[mask]
    return float(loglik), grad


def log_likelihood(tree: TreeTopology, q: np.ndarray, Y: Alignment) -> float:
    """Pruning log-likelihood, rooted at the tree's designated interior node."""
    value, _ = _run_pruning(tree, q, Y, want_grad=False)
    return value


def log_likelihood_grad(tree: TreeTopology, q: np.ndarray, Y: Alignment):
    """Log-likelihood plus its gradient in every branch length (edge-id order)."""
    return _run_pruning(tree, q, Y, want_grad=True)


# -- prior -------------------------------------------------------------------

BRANCH_PRIOR_RATE = 10.0


def log_prior(tree: TreeTopology, q: np.ndarray,
              rate: float = BRANCH_PRIOR_RATE) -> float:
    """Uniform over topologies plus i.i.d. exponential branch lengths."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q < 0):
        raise ValueError("negative branch length in prior")
    n = tree.n_leaves
    topo = -np.log(double_factorial(2 * n - 5))
    return float(topo + np.sum(np.log(rate) - rate * q))


def log_prior_grad(q: np.ndarray, rate: float = BRANCH_PRIOR_RATE) -> np.ndarray:
    return np.full_like(np.asarray(q, dtype=np.float64), -rate)


# -- simulation --------------------------------------------------------------

def simulate_alignment(tree: TreeTopology, q: np.ndarray, n_sites: int,
                       rng: np.random.Generator) -> Alignment:
    """Draw sequences by evolving uniform root states along the tree."""
    order = tree.traversal()
    parent = order.parent
    states = np.empty((tree.n_nodes, n_sites), dtype=np.int64)
    states[tree.root_id] = rng.integers(0, 4, size=n_sites)
    for v in order.preorder[1:]:
        v = int(v)
        P = transition_matrix(float(q[tree.edge_id(int(parent[v]), v)]))
        cum = np.cumsum(P, axis=1)
        u = rng.random(n_sites)
        parent_states = states[parent[v]]
        states[v] = (u[:, None] > cum[parent_states]).sum(axis=1)
    codes = np.zeros((tree.n_leaves, n_sites), dtype=np.uint8)
    masks = np.array([1, 2, 4, 8], dtype=np.uint8)
    for node in range(tree.n_nodes):
        k = tree.taxon[node]
        if k >= 0:
            codes[k] = masks[states[node]]
    return Alignment(taxa=tree.taxa, codes=codes)

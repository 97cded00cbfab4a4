"""Energy-based tree probability estimation over an enumerated space, trained
by noise contrastive estimation against the uniform noise distribution.

The energy of a tree is MLP(sum over nodes of MLP(GNN(embedded features))),
the model distribution is exp(-F) / Z with the log normalizer a free trained
parameter, and exact metrics (population NCE loss, KL to the target) are
computed over the full enumeration, which is feasible at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .embedding import embed_two_pass, one_hot_tips
from .gnn import GnnConfig, Mlp, TreeBatch, TreeGnn, TreeStruct, readout_graph
from .trees import TaxaSet, TreeTopology, enumerate_unrooted, \
    n_unrooted_topologies


@dataclass
class TreeSpaceTable:
    """Full enumeration of a tree space with a target probability per tree."""

    taxa: TaxaSet
    trees: list[TreeTopology]
    probs: np.ndarray

    def __post_init__(self):
        if len(self.trees) != len(self.probs):
            raise ValueError("one probability per tree required")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("probs must be a distribution")

    @property
    def size(self) -> int:
        return len(self.trees)


def sample_dirichlet_target(n_taxa: int, beta: float, seed: int) -> TreeSpaceTable:
    """Symmetric Dirichlet(beta) draw over the enumerated space, assigned to
    trees in enumeration order."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    taxa = TaxaSet([f"T{i}" for i in range(n_taxa)])
    trees = list(enumerate_unrooted(taxa))
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.full(len(trees), beta))
    return TreeSpaceTable(taxa=taxa, trees=trees, probs=probs)


def uniform_target(n_taxa: int) -> TreeSpaceTable:
    taxa = TaxaSet([f"T{i}" for i in range(n_taxa)])
    trees = list(enumerate_unrooted(taxa))
    probs = np.full(len(trees), 1.0 / len(trees))
    return TreeSpaceTable(taxa=taxa, trees=trees, probs=probs)


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(b[mask]))))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def optimal_nce_loss(table: TreeSpaceTable) -> float:
    """Population NCE loss at the optimum: 2 log 2 - 2 JSD(target || uniform)."""
    uniform = np.full(table.size, 1.0 / table.size)
    return 2.0 * np.log(2.0) - 2.0 * jensen_shannon(table.probs, uniform)


class EnumeratedSpace:
    """Precomputed embeddings and adjacency for every tree in the space.

    All trees on N taxa share the node layout (leaves 0..N-1, interior above),
    so a batch is pure array gathering plus an index offset.
    """

    def __init__(self, table: TreeSpaceTable):
        self.table = table
        trees = table.trees
        n = len(table.taxa)
        self.v = 2 * n - 2
        self.e = 2 * n - 3
        t = len(trees)
        self.feat_dim = n
        self.nbr_stack = np.empty((t, self.v, 3), dtype=np.int64)
        self.edge_u_stack = np.empty((t, self.e), dtype=np.int64)
        self.edge_v_stack = np.empty((t, self.e), dtype=np.int64)
        self.x_stack = np.empty((t, self.v, n))
        deg = np.array([1.0 if u < n else 3.0 for u in range(self.v)])
        self.deg_template = deg
        for i, tree in enumerate(trees):
            s = TreeStruct(tree)
            self.nbr_stack[i] = s.nbr
            self.edge_u_stack[i] = s.edge_u
            self.edge_v_stack[i] = s.edge_v
            self.x_stack[i] = embed_two_pass(tree, one_hot_tips(tree))

    def batch(self, idx: np.ndarray) -> tuple[TreeBatch, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        b = len(idx)
        v, e = self.v, self.e
        off_nodes = (np.arange(b) * v)[:, None, None]
        nbr = self.nbr_stack[idx] + off_nodes
        nbr[self.nbr_stack[idx] < 0] = -1
        nbr = nbr.reshape(b * v, 3)
        off_e = (np.arange(b) * v)[:, None]
        edge_u = (self.edge_u_stack[idx] + off_e).reshape(-1)
        edge_v = (self.edge_v_stack[idx] + off_e).reshape(-1)
        dir_src = np.empty(2 * b * e, dtype=np.int64)
        dir_dst = np.empty(2 * b * e, dtype=np.int64)
        dir_src[0::2] = edge_u
        dir_dst[0::2] = edge_v
        dir_src[1::2] = edge_v
        dir_dst[1::2] = edge_u
        deg = np.tile(self.deg_template, b)
        batch = TreeBatch(nbr, deg, edge_u, edge_v, dir_src, dir_dst,
                          b, v, e)
        x = self.x_stack[idx].reshape(b * v, self.feat_dim)
        return batch, x


class EbmModel:
    """GNN energy model over tree topologies with a free log-normalizer."""

    def __init__(self, taxa: TaxaSet, config: GnnConfig, seed: int = 0,
                 log_z_init: float | None = None):
        self.taxa = taxa
        self.config = config
        rng = np.random.default_rng(seed)
        self.store = ParameterStore()
        self.gnn = TreeGnn(self.store, "gnn", config, len(taxa), rng)
        h = config.hidden_dim
        self.head = Mlp(self.store, "head", [h, h, 1], rng)
        if log_z_init is None:
            # uniform-model consistency: Z = |T| when all energies are 0
            log_z_init = float(np.log(n_unrooted_topologies(len(taxa))))
        self.log_z = self.store.param("log_z", np.array([log_z_init]))

    def energies(self, batch: TreeBatch, x: np.ndarray) -> Tensor:
        """(B, 1) tensor: MLP head on the summed node features."""
        node_h = self.gnn.node_features(batch, x)
        return self.head(readout_graph(node_h, batch))

    def energy(self, tree: TreeTopology) -> float:
        batch = TreeBatch.single(tree)
        x = embed_two_pass(tree, one_hot_tips(tree))
        with ad.no_grad():
            return float(self.energies(batch, x).data[0, 0])

    def log_q(self, tree: TreeTopology) -> float:
        """Unnormalized model log-probability -F - logZ (free-parameter Z)."""
        return -self.energy(tree) - float(self.log_z.data[0])

    def energies_over_space(self, space: EnumeratedSpace,
                            chunk: int = 4096) -> np.ndarray:
        out = np.empty(space.table.size)
        with ad.no_grad():
            for lo in range(0, space.table.size, chunk):
                idx = np.arange(lo, min(lo + chunk, space.table.size))
                batch, x = space.batch(idx)
                out[idx] = self.energies(batch, x).data[:, 0]
        return out


def nce_loss(model: EbmModel, space: EnumeratedSpace,
             data_idx: np.ndarray, noise_idx: np.ndarray) -> Tensor:
    """Monte Carlo NCE objective on a data batch and a uniform-noise batch.

    D(tree) = log q - log p_n with the normalizer folded into the free log_z;
    the loss is E_data[-log S(D)] + E_noise[-log(1 - S(D))].
    """
    if len(data_idx) == 0 or len(noise_idx) == 0:
        raise ValueError("empty batch")
    nd = len(data_idx)
    batch, x = space.batch(np.concatenate([data_idx, noise_idx]))
    f = model.energies(batch, x)
    log_noise = -np.log(space.table.size)
    d = ad.sub(Tensor(-log_noise), ad.add(f, model.log_z))
    d_data = ad.gather_rows(d, np.arange(nd))
    d_noise = ad.gather_rows(d, np.arange(nd, nd + len(noise_idx)))
    return ad.add(ad.mean_all(ad.softplus(ad.scale(d_data, -1.0))),
                  ad.mean_all(ad.softplus(d_noise)))


def population_nce_loss(table: TreeSpaceTable, energies: np.ndarray,
                        log_z: float) -> float:
    """Exact NCE objective under the full enumeration (no sampling)."""
    d = -energies - log_z + np.log(table.size)
    data_term = float(table.probs @ np.logaddexp(0.0, -d))
    noise_term = float(np.mean(np.logaddexp(0.0, d)))
    return data_term + noise_term


def kl_to_target(table: TreeSpaceTable, energies: np.ndarray) -> float:
    """KL(target || exactly-normalized model distribution)."""
    logq = -energies - _logsumexp(-energies)
    p = table.probs
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - logq[mask])))


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.sum(np.exp(x - m))))


@dataclass
class NceTraceRow:
    step: int
    nce_loss: float      # exact population loss over the enumeration
    kl: float            # exact KL(target || normalized model)
    log_z: float
    minibatch_loss: float


def train_nce(model: EbmModel, table: TreeSpaceTable, steps: int,
              batch_size: int = 128, lr: float = 1e-3, seed: int = 0,
              eval_every: int = 500, lr_final: float | None = None,
              space: EnumeratedSpace | None = None) -> list[NceTraceRow]:
    """NCE training loop with exact metrics every ``eval_every`` steps.

    Equal data/noise batch sizes; data sampled by inverse CDF over the table,
    noise uniform.  ``lr_final`` turns on cosine decay from ``lr`` down to it.
    Deterministic for a fixed seed.
    """
    if space is None:
        space = EnumeratedSpace(table)
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(table.probs)
    cdf[-1] = 1.0
    trace: list[NceTraceRow] = []
    running = 0.0
    n_running = 0

    def lr_at(step: int) -> float:
        if lr_final is None:
            return lr
        frac = 0.5 * (1.0 + np.cos(np.pi * step / steps))
        return lr_final + (lr - lr_final) * frac

    def record(step: int):
        energies = model.energies_over_space(space)
        log_z = float(model.log_z.data[0])
        row = NceTraceRow(
            step=step,
            nce_loss=population_nce_loss(table, energies, log_z),
            kl=kl_to_target(table, energies),
            log_z=log_z,
            minibatch_loss=running / max(n_running, 1),
        )
        trace.append(row)

    for step in range(1, steps + 1):
        data_idx = np.searchsorted(cdf, rng.random(batch_size))
        noise_idx = rng.integers(0, table.size, size=batch_size)
        model.store.zero_grad()
        loss = nce_loss(model, space, data_idx, noise_idx)
        ad.backward(loss)
        model.store.adam_step(lr_at(step))
        running += float(loss.data)
        n_running += 1
        if step % eval_every == 0 or step == steps:
            record(step)
            running = 0.0
            n_running = 0
    return trace

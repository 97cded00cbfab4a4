"""GNN convolution operators, MLPs and readouts on batched trees.

Batches hold same-shape trees (equal leaf counts) as flat row-major node
blocks: rows [b*V, (b+1)*V) belong to graph b, so graph readout is a plain
block sum and neighbor aggregation is one gather over a padded index matrix.

Variants (one message-passing step each):
    gcn   h'_v = W m_v / sqrt(1+d_v),  m_v = sum_{u in N(v) u {v}} h_u / sqrt(1+d_u)
    gin   h'_v = MLP((1+eps) h_v + sum_{u in N(v)} h_u)
    sage  h'_v = W1 h_v + W2 mean_{u in N(v)} h_u
    ggnn  h'_v = GRU(sum_{u in N(v)} W h_u, h_v)
    edge  h'_v = sum_{u in N(v)} MLP(h_v || h_u - h_v)   (keeps e_{u->v})
    mlp   no message passing (T=0); raw features go straight to the node MLP
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .trees import TreeTopology

VARIANTS = ("mlp", "gcn", "gin", "sage", "ggnn", "edge")


@dataclass
class GnnConfig:
    variant: str = "ggnn"
    layers: int = 2          # message-passing steps, input layer included
    hidden_dim: int = 100
    mlp_layers: int = 2
    gin_eps_learnable: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown GNN variant {self.variant!r}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")


class TreeStruct:
    """Per-tree adjacency arrays shared by every batch that contains the tree."""

    __slots__ = ("n_nodes", "n_edges", "nbr", "deg", "edge_u", "edge_v",
                 "dir_src", "dir_dst")

    def __init__(self, tree: TreeTopology):
        n = tree.n_nodes
        max_deg = max(tree.degree(u) for u in range(n))
        self.n_nodes = n
        self.n_edges = len(tree.edges)
        self.nbr = np.full((n, max_deg), -1, dtype=np.int64)
        for u in range(n):
            for j, v in enumerate(tree.neighbors[u]):
                self.nbr[u, j] = v
        self.deg = np.array([float(tree.degree(u)) for u in range(n)])
        e = np.asarray(tree.edges, dtype=np.int64)
        self.edge_u = e[:, 0].copy()
        self.edge_v = e[:, 1].copy()
        # directed edges interleaved per edge id: 2i = u->v, 2i+1 = v->u
        self.dir_src = np.empty(2 * self.n_edges, dtype=np.int64)
        self.dir_dst = np.empty(2 * self.n_edges, dtype=np.int64)
        self.dir_src[0::2] = self.edge_u
        self.dir_dst[0::2] = self.edge_v
        self.dir_src[1::2] = self.edge_v
        self.dir_dst[1::2] = self.edge_u


class TreeBatch:
    """Stacked structure arrays for B same-shape trees."""

    def __init__(self, nbr, deg, edge_u, edge_v, dir_src, dir_dst,
                 n_graphs: int, nodes_per_graph: int, edges_per_graph: int):
        self.n_graphs = n_graphs
        self.nodes_per_graph = nodes_per_graph
        self.edges_per_graph = edges_per_graph
        self.n_rows = n_graphs * nodes_per_graph
        self.nbr = nbr
        self.deg_col = deg[:, None]
        self.edge_u = edge_u
        self.edge_v = edge_v
        self.dir_src = dir_src
        self.dir_dst = dir_dst
        self._gcn_coef = None
        self._inv_deg = None

    @property
    def gcn_coef(self) -> Tensor:
        if self._gcn_coef is None:
            self._gcn_coef = Tensor(1.0 / np.sqrt(1.0 + self.deg_col))
        return self._gcn_coef

    @property
    def inv_deg(self) -> Tensor:
        if self._inv_deg is None:
            self._inv_deg = Tensor(1.0 / self.deg_col)
        return self._inv_deg

    @classmethod
    def from_structs(cls, structs: list[TreeStruct]) -> "TreeBatch":
        v = structs[0].n_nodes
        e = structs[0].n_edges
        width = max(s.nbr.shape[1] for s in structs)
        if any(s.n_nodes != v or s.n_edges != e for s in structs):
            raise ValueError("all trees in a batch must have the same shape")
        b = len(structs)
        nbr = np.full((b * v, width), -1, dtype=np.int64)
        deg = np.empty(b * v)
        edge_u = np.empty(b * e, dtype=np.int64)
        edge_v = np.empty(b * e, dtype=np.int64)
        dir_src = np.empty(2 * b * e, dtype=np.int64)
        dir_dst = np.empty(2 * b * e, dtype=np.int64)
        for i, s in enumerate(structs):
            off = i * v
            block = s.nbr + off
            block[s.nbr < 0] = -1
            nbr[off:off + v, : s.nbr.shape[1]] = block
            deg[off:off + v] = s.deg
            edge_u[i * e:(i + 1) * e] = s.edge_u + off
            edge_v[i * e:(i + 1) * e] = s.edge_v + off
            dir_src[2 * i * e:2 * (i + 1) * e] = s.dir_src + off
            dir_dst[2 * i * e:2 * (i + 1) * e] = s.dir_dst + off
        return cls(nbr, deg, edge_u, edge_v, dir_src, dir_dst, b, v, e)

    @classmethod
    def single(cls, tree: TreeTopology) -> "TreeBatch":
        return cls.from_structs([TreeStruct(tree)])


class Mlp:
    """Stack of affine layers with ELU between them (none after the last)."""

    def __init__(self, store: ParameterStore, name: str, dims: list[int],
                 rng: np.random.Generator):
        self.weights = []
        self.biases = []
        for i in range(len(dims) - 1):
            self.weights.append(
                store.param(f"{name}.w{i}", ad.glorot((dims[i + 1], dims[i]), rng))
            )
            self.biases.append(store.param(f"{name}.b{i}", np.zeros(dims[i + 1])))

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.add(ad.matmul(x, _t(w)), b)
            if i + 1 < len(self.weights):
                x = ad.elu(x)
        return x


def _t(w: Tensor) -> Tensor:
    # transpose view without copying gradients twice
    def back(g):
        if w.grad is None:
            w.grad = g.T.copy()
        else:
            w.grad += g.T
    out = Tensor(w.data.T, requires_grad=w.requires_grad)
    if w.requires_grad and ad._grad_enabled:
        out._parents = (w,)
        out._backward = back
    return out


class GcnConv:
    def __init__(self, store, name, din, dout, rng):
        self.w = store.param(f"{name}.w", ad.glorot((dout, din), rng))

    def __call__(self, batch: TreeBatch, h: Tensor) -> Tensor:
        hn = ad.mul(h, batch.gcn_coef)
        m = ad.add(ad.gather_sum(hn, batch.nbr), hn)
        return ad.matmul(ad.mul(m, batch.gcn_coef), _t(self.w))


class GinConv:
    def __init__(self, store, name, din, dout, rng, eps_learnable=False):
        self.mlp = Mlp(store, f"{name}.mlp", [din, dout, dout], rng)
        self.eps = store.param(f"{name}.eps", np.zeros(1)) if eps_learnable else None

    def __call__(self, batch: TreeBatch, h: Tensor) -> Tensor:
        m = ad.gather_sum(h, batch.nbr)
        pre = ad.add(h, m)
        if self.eps is not None:
            pre = ad.add(pre, ad.mul(h, self.eps))
        return self.mlp(pre)


class SageConv:
    def __init__(self, store, name, din, dout, rng):
        self.w1 = store.param(f"{name}.w1", ad.glorot((dout, din), rng))
        self.w2 = store.param(f"{name}.w2", ad.glorot((dout, din), rng))

    def __call__(self, batch: TreeBatch, h: Tensor) -> Tensor:
        m = ad.mul(ad.gather_sum(h, batch.nbr), batch.inv_deg)
        return ad.add(ad.matmul(h, _t(self.w1)), ad.matmul(m, _t(self.w2)))


class GgnnConv:
    """Gated update: GRU(sum of linearly transformed neighbors, h)."""

    def __init__(self, store, name, dim, rng):
        self.dim = dim
        self.w = store.param(f"{name}.w", ad.glorot((dim, dim), rng))
        self.wi = store.param(f"{name}.wi", ad.glorot((3 * dim, dim), rng))
        self.bi = store.param(f"{name}.bi", np.zeros(3 * dim))
        self.wh = store.param(f"{name}.wh", ad.glorot((3 * dim, dim), rng))
        self.bh = store.param(f"{name}.bh", np.zeros(3 * dim))

    def __call__(self, batch: TreeBatch, h: Tensor) -> Tensor:
        m = ad.gather_sum(ad.matmul(h, _t(self.w)), batch.nbr)
        mi = ad.matmul(m, _t(self.wi))
        mh = ad.matmul(h, _t(self.wh))
        return ad.gru_cell(mi, mh, self.bi, self.bh, h)


class EdgeConv:
    """Per-directed-edge MLP(h_v || h_u - h_v); node update sums incoming."""

    def __init__(self, store, name, din, dout, rng):
        self.mlp = Mlp(store, f"{name}.mlp", [2 * din, dout, dout], rng)
        self.last_edge_features: Tensor | None = None

    def __call__(self, batch: TreeBatch, h: Tensor) -> Tensor:
        hv = ad.gather_rows(h, batch.dir_dst)
        hu = ad.gather_rows(h, batch.dir_src)
        e = self.mlp(ad.concat([hv, ad.sub(hu, hv)], axis=1))
        self.last_edge_features = e
        return ad.scatter_sum(e, batch.dir_dst, batch.n_rows)


class TreeGnn:
    """Conv stack followed by the shared node-level MLP.

    ``layers`` counts message-passing steps; 0 skips straight to the node MLP
    (the pure-MLP baseline on raw embeddings).
    """

    def __init__(self, store: ParameterStore, name: str, config: GnnConfig,
                 in_dim: int, rng: np.random.Generator):
        self.config = config
        self.in_dim = in_dim
        h = config.hidden_dim
        t = 0 if config.variant == "mlp" else config.layers
        self.convs = []
        if t > 0 and config.variant == "ggnn":
            if in_dim > h:
                raise ValueError("ggnn needs hidden_dim >= input dim (zero pad)")
            for i in range(t):
                self.convs.append(GgnnConv(store, f"{name}.conv{i}", h, rng))
        else:
            din = in_dim
            for i in range(t):
                cls = {"gcn": GcnConv, "gin": GinConv, "sage": SageConv,
                       "edge": EdgeConv}[config.variant]
                if config.variant == "gin":
                    conv = cls(store, f"{name}.conv{i}", din, h, rng,
                               eps_learnable=config.gin_eps_learnable)
                else:
                    conv = cls(store, f"{name}.conv{i}", din, h, rng)
                self.convs.append(conv)
                din = h
        mlp_in = in_dim if t == 0 else h
        dims = [mlp_in] + [h] * (config.mlp_layers - 1) + [h]
        self.node_mlp = Mlp(store, f"{name}.node_mlp", dims, rng)

    def node_features(self, batch: TreeBatch, x: np.ndarray) -> Tensor:
        h = Tensor(x)
        cfg = self.config
        if self.convs and cfg.variant == "ggnn":
            pad = cfg.hidden_dim - self.in_dim
            if pad:
                h = ad.concat([h, Tensor(np.zeros((x.shape[0], pad)))], axis=1)
        for i, conv in enumerate(self.convs):
            h = conv(batch, h)
            if cfg.variant in ("gcn", "sage") and i + 1 < len(self.convs):
                h = ad.elu(h)
        return self.node_mlp(h)

    def edge_features(self, batch: TreeBatch, node_h: Tensor) -> Tensor:
        """Symmetric edge readout: elementwise max over the two endpoints.

        The edge variant additionally max-combines the directed edge features
        from its final conv layer into the readout.
        """
        hu = ad.gather_rows(node_h, batch.edge_u)
        hv = ad.gather_rows(node_h, batch.edge_v)
        he = ad.maximum(hu, hv)
        if self.convs and self.config.variant == "edge":
            e = self.convs[-1].last_edge_features
            n = e.data.shape[0]
            fwd = ad.gather_rows(e, np.arange(0, n, 2, dtype=np.int64))
            rev = ad.gather_rows(e, np.arange(1, n, 2, dtype=np.int64))
            he = ad.maximum(he, ad.maximum(fwd, rev))
        return he


def readout_graph(node_h: Tensor, batch: TreeBatch) -> Tensor:
    """Permutation-invariant graph feature: sum over the graph's nodes."""
    return ad.sum_blocks(node_h, batch.nodes_per_graph)


def readout_edge(h_u: Tensor, h_v: Tensor) -> Tensor:
    """Permutation-invariant edge feature: elementwise maximum."""
    return ad.maximum(h_u, h_v)

import numpy as np
import pytest

from oracles import rel_err
from phylotopo import autodiff as ad
from phylotopo.autodiff import ParameterStore, Tensor
from phylotopo.gnn import (
    EdgeConv,
    GcnConv,
    GgnnConv,
    GinConv,
    GnnConfig,
    Mlp,
    SageConv,
    TreeBatch,
    TreeGnn,
    TreeStruct,
    readout_edge,
    readout_graph,
)
from phylotopo.trees import TaxaSet, parse_newick, random_unrooted

VARIANTS = ["gcn", "gin", "sage", "ggnn", "edge"]


@pytest.fixture()
def tree_and_batch():
    rng = np.random.default_rng(0)
    taxa = TaxaSet(list("ABCDEF"))
    tree = random_unrooted(taxa, rng)
    return tree, TreeBatch.single(tree), rng


def manual_neighbors(tree):
    return {u: list(tree.neighbors[u]) for u in range(tree.n_nodes)}


class TestConvFormulas:
    def test_gcn_two_node_path_identity_weight_is_plain_mean(self):
        # both degrees 1: output = (h_v/sqrt(2) + h_u/sqrt(2))/sqrt(2)
        #                         = (h_u + h_v)/2
        rng = np.random.default_rng(123)
        batch = TreeBatch(np.array([[1], [0]], dtype=np.int64),
                          np.ones(2),
                          np.array([0], dtype=np.int64),
                          np.array([1], dtype=np.int64),
                          np.array([0, 1], dtype=np.int64),
                          np.array([1, 0], dtype=np.int64), 1, 2, 1)
        store = ParameterStore()
        conv = GcnConv(store, "c", 3, 3, rng)
        conv.w.data = np.eye(3)
        x = rng.standard_normal((2, 3))
        out = conv(batch, Tensor(x)).data
        mean = (x[0] + x[1]) / 2.0
        assert np.allclose(out[0], mean, atol=1e-14)
        assert np.allclose(out[1], mean, atol=1e-14)

    def test_gcn_identity_weight_is_normalized_mean(self, tree_and_batch):
        tree, batch, rng = tree_and_batch
        x = rng.standard_normal((tree.n_nodes, 4))
        store = ParameterStore()
        conv = GcnConv(store, "c", 4, 4, rng)
        conv.w.data = np.eye(4)
        out = conv(batch, Tensor(x)).data
        deg = np.array([tree.degree(u) for u in range(tree.n_nodes)], float)
        m = np.zeros_like(x)
        for v, nbrs in manual_neighbors(tree).items():
            for u in nbrs + [v]:
                m[v] += x[u] / np.sqrt(1 + deg[u])
        assert np.allclose(out, m / np.sqrt(1 + deg)[:, None], atol=1e-12)

    def test_gin_eps_zero_identity_mlp(self, tree_and_batch):
        tree, batch, rng = tree_and_batch
        x = rng.standard_normal((tree.n_nodes, 4))
        store = ParameterStore()
        conv = GinConv(store, "c", 4, 4, rng)
        conv.mlp.weights[0].data = np.eye(4)
        conv.mlp.weights[1].data = np.eye(4)
        conv.mlp.biases[0].data[:] = 100.0   # keep ELU linear
        conv.mlp.biases[1].data[:] = -100.0
        out = conv(batch, Tensor(x)).data
        want = x.copy()
        for v, nbrs in manual_neighbors(tree).items():
            for u in nbrs:
                want[v] += x[u]
        assert np.allclose(out, want, atol=1e-10)

    def test_sage_formula(self, tree_and_batch):
        tree, batch, rng = tree_and_batch
        x = rng.standard_normal((tree.n_nodes, 3))
        store = ParameterStore()
        conv = SageConv(store, "c", 3, 5, rng)
        out = conv(batch, Tensor(x)).data
        w1, w2 = conv.w1.data, conv.w2.data
        for v, nbrs in manual_neighbors(tree).items():
            m = np.mean([x[u] for u in nbrs], axis=0)
            assert np.allclose(out[v], w1 @ x[v] + w2 @ m, atol=1e-12)

    def test_ggnn_matches_manual_gru(self, tree_and_batch):
        tree, batch, rng = tree_and_batch
        d = 4
        x = rng.standard_normal((tree.n_nodes, d))
        store = ParameterStore()
        conv = GgnnConv(store, "c", d, rng)
        out = conv(batch, Tensor(x)).data
        w = conv.w.data
        wi, bi = conv.wi.data, conv.bi.data
        wh, bh = conv.wh.data, conv.bh.data

        def sig(v):
            return 1 / (1 + np.exp(-v))

        for v, nbrs in manual_neighbors(tree).items():
            m = np.sum([w @ x[u] for u in nbrs], axis=0)
            gi = wi @ m + bi
            gh = wh @ x[v] + bh
            r = sig(gi[:d] + gh[:d])
            z = sig(gi[d:2 * d] + gh[d:2 * d])
            c = np.tanh(gi[2 * d:] + r * gh[2 * d:])
            want = (1 - z) * c + z * x[v]
            assert np.allclose(out[v], want, atol=1e-12)

    def test_edge_conv_sums_incoming_edge_features(self, tree_and_batch):
        tree, batch, rng = tree_and_batch
        x = rng.standard_normal((tree.n_nodes, 3))
        store = ParameterStore()
        conv = EdgeConv(store, "c", 3, 4, rng)
        out = conv(batch, Tensor(x)).data

        def mlp(v):
            h = conv.mlp.weights[0].data @ v + conv.mlp.biases[0].data
            h = np.where(h < 0, np.expm1(np.minimum(h, 0)), h)
            return conv.mlp.weights[1].data @ h + conv.mlp.biases[1].data

        for v, nbrs in manual_neighbors(tree).items():
            want = np.sum(
                [mlp(np.concatenate([x[v], x[u] - x[v]])) for u in nbrs],
                axis=0)
            assert np.allclose(out[v], want, atol=1e-10)


class TestEquivariance:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_conv_outputs_follow_relabeling(self, variant):
        # same topology entered with two different node-id layouts: outputs
        # must agree node-for-node under the taxon correspondence
        rng = np.random.default_rng(42)
        s1 = "((A,B),C,(D,E));"
        s2 = "((D,E),(B,A),C);"
        taxa = TaxaSet(list("ABCDE"))
        t1 = parse_newick(s1, taxa=taxa)
        t2 = parse_newick(s2, taxa=taxa)
        cfg = GnnConfig(variant=variant, layers=2, hidden_dim=8)
        store = ParameterStore()
        gnn = TreeGnn(store, "g", cfg, 5, rng)

        from phylotopo.embedding import embed_two_pass, one_hot_tips
        out = {}
        trees = {"a": t1, "b": t2}
        for key, t in trees.items():
            batch = TreeBatch.single(t)
            x = embed_two_pass(t, one_hot_tips(t))
            with ad.no_grad():
                out[key] = gnn.node_features(batch, x).data
        for k in range(5):
            u1 = t1.leaf_of_taxon(k)
            u2 = t2.leaf_of_taxon(k)
            assert np.allclose(out["a"][u1], out["b"][u2], atol=1e-9)

    def test_graph_readout_invariant(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((7, 5))
        perm = rng.permutation(7)
        t = Tensor(x)
        dummy = TreeBatch(np.zeros((7, 1), dtype=np.int64), np.ones(7),
                          np.zeros(0, dtype=np.int64),
                          np.zeros(0, dtype=np.int64),
                          np.zeros(0, dtype=np.int64),
                          np.zeros(0, dtype=np.int64), 1, 7, 0)
        a = readout_graph(t, dummy).data
        b = readout_graph(Tensor(x[perm]), dummy).data
        assert np.allclose(a, b, atol=1e-12)


class TestReadouts:
    def test_single_node_graph_feature(self):
        x = np.array([[1.0, 2.0, 3.0]])
        batch = TreeBatch(np.zeros((1, 1), dtype=np.int64), np.ones(1),
                          np.zeros(0, dtype=np.int64),
                          np.zeros(0, dtype=np.int64),
                          np.zeros(0, dtype=np.int64),
                          np.zeros(0, dtype=np.int64), 1, 1, 0)
        assert np.array_equal(readout_graph(Tensor(x), batch).data, x)

    def test_zero_features_zero_readout(self):
        batch = TreeBatch(np.zeros((4, 1), dtype=np.int64), np.ones(4),
                          np.zeros(0, dtype=np.int64),
                          np.zeros(0, dtype=np.int64),
                          np.zeros(0, dtype=np.int64),
                          np.zeros(0, dtype=np.int64), 2, 2, 0)
        out = readout_graph(Tensor(np.zeros((4, 3))), batch).data
        assert np.array_equal(out, np.zeros((2, 3)))

    def test_edge_readout_examples(self):
        x = Tensor(np.array([[1.0, -2.0]]))
        y = Tensor(np.array([[0.0, 3.0]]))
        assert np.array_equal(readout_edge(x, y).data, [[1.0, 3.0]])
        assert np.array_equal(readout_edge(x, x).data, x.data)
        rng = np.random.default_rng(2)
        a = Tensor(rng.standard_normal((5, 4)))
        b = Tensor(rng.standard_normal((5, 4)))
        assert np.array_equal(readout_edge(a, b).data,
                              readout_edge(b, a).data)


class TestMlpAndStack:
    def test_zero_weights_zero_output(self):
        rng = np.random.default_rng(3)
        store = ParameterStore()
        mlp = Mlp(store, "m", [3, 4, 2], rng)
        for w in mlp.weights:
            w.data[:] = 0.0
        out = mlp(Tensor(rng.standard_normal((5, 3)))).data
        assert np.array_equal(out, np.zeros((5, 2)))

    def test_identity_single_layer(self):
        rng = np.random.default_rng(4)
        store = ParameterStore()
        mlp = Mlp(store, "m", [3, 3], rng)
        mlp.weights[0].data = np.eye(3)
        x = rng.standard_normal((4, 3))
        assert np.allclose(mlp(Tensor(x)).data, x, atol=1e-15)

    def test_mlp_gradient_fd(self):
        rng = np.random.default_rng(5)
        store = ParameterStore()
        mlp = Mlp(store, "m", [3, 4, 2], rng)
        x = rng.standard_normal((6, 3))

        def loss():
            return ad.sum_all(ad.square(mlp(Tensor(x))))

        store.zero_grad()
        ad.backward(loss())
        for name, p in store.params.items():
            fd = ad.finite_difference(lambda: float(loss().data), p.data)
            assert rel_err(store.grad_or_zero(name), fd, floor=1e-6) < 1e-4

    def test_t0_equals_pure_mlp_on_raw_features(self):
        rng = np.random.default_rng(6)
        taxa = TaxaSet(list("ABCDE"))
        tree = random_unrooted(taxa, rng)
        cfg = GnnConfig(variant="mlp", layers=2, hidden_dim=8)
        store = ParameterStore()
        gnn = TreeGnn(store, "g", cfg, 5, rng)
        assert gnn.convs == []
        x = rng.standard_normal((tree.n_nodes, 5))
        batch = TreeBatch.single(tree)
        with ad.no_grad():
            got = gnn.node_features(batch, x).data
            want = gnn.node_mlp(Tensor(x)).data
        assert np.array_equal(got, want)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_full_stack_gradient_fd(self, variant):
        rng = np.random.default_rng(7)
        taxa = TaxaSet(list("ABCD"))
        tree = random_unrooted(taxa, rng)
        batch = TreeBatch.single(tree)
        x = rng.standard_normal((tree.n_nodes, 4))
        cfg = GnnConfig(variant=variant, layers=2, hidden_dim=6)
        store = ParameterStore()
        gnn = TreeGnn(store, "g", cfg, 4, rng)

        def loss():
            h = gnn.node_features(batch, x)
            he = gnn.edge_features(batch, h)
            return ad.sum_all(ad.square(he))

        store.zero_grad()
        ad.backward(loss())
        for name, p in store.params.items():
            fd = ad.finite_difference(lambda: float(loss().data), p.data)
            assert rel_err(store.grad_or_zero(name), fd, floor=1e-6) < 1e-4, name

    def test_ggnn_requires_wide_enough_hidden(self):
        rng = np.random.default_rng(8)
        store = ParameterStore()
        with pytest.raises(ValueError):
            TreeGnn(store, "g", GnnConfig(variant="ggnn", hidden_dim=3),
                    in_dim=5, rng=rng)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            GnnConfig(variant="transformer")

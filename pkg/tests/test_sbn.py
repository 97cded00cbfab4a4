import numpy as np
import pytest

from oracles import rel_err
from phylotopo.sbn import (
    SbnModel,
    SupportError,
    build_support,
    rebuild_rooted,
    rooted_decomposition,
    subsplit,
    tree_psps,
)
from phylotopo.trees import (
    TaxaSet,
    enumerate_unrooted,
    parse_newick,
    serialize_newick,
    splits_of,
)


def clade_names(mask, taxa):
    return "".join(n for k, n in enumerate(taxa.names) if mask >> k & 1)


def pretty(s, taxa):
    return f"{clade_names(s[0], taxa)}|{clade_names(s[1], taxa)}"


@pytest.fixture(scope="module")
def taxa4():
    return TaxaSet(list("ABCD"))


@pytest.fixture(scope="module")
def trees4(taxa4):
    return list(enumerate_unrooted(taxa4))


@pytest.fixture(scope="module")
def complete4(trees4):
    return build_support(trees4)


@pytest.fixture(scope="module")
def taxa5():
    return TaxaSet(list("ABCDE"))


@pytest.fixture(scope="module")
def trees5(taxa5):
    return list(enumerate_unrooted(taxa5))


@pytest.fixture(scope="module")
def complete5(trees5):
    return build_support(trees5)


class TestDecomposition:
    def test_balanced_four_taxon(self, taxa4):
        t = parse_newick("((A,B),(C,D));", taxa=taxa4)
        events = [(pretty(p, taxa4) if p else "ROOT", pretty(c, taxa4))
                  for p, c in rooted_decomposition(t)]
        assert events[0] == ("ROOT", "AB|CD")
        assert ("AB|CD", "A|B") in events
        assert ("AB|CD", "C|D") in events
        assert len(events) == 3

    def test_caterpillar_four_taxon(self, taxa4):
        t = parse_newick("((A,(B,C)),D);", taxa=taxa4)
        events = [(pretty(p, taxa4) if p else "ROOT", pretty(c, taxa4))
                  for p, c in rooted_decomposition(t)]
        assert events == [("ROOT", "ABC|D"), ("ABC|D", "A|BC"),
                          ("A|BC", "B|C")]

    def test_cherry_terminates_in_singletons(self, taxa4):
        t = parse_newick("((A,B),(C,D));", taxa=taxa4)
        events = rooted_decomposition(t)
        # nothing below the two-taxon subsplits: exactly 3 events
        assert len(events) == 3

    def test_deterministic_and_invertible(self, taxa5):
        rng = np.random.default_rng(0)
        for s in ["((A,B),(C,(D,E)));", "(((A,C),B),(D,E));"]:
            t = parse_newick(s, taxa=taxa5)
            ev1 = rooted_decomposition(t)
            ev2 = rooted_decomposition(t)
            assert ev1 == ev2
            rebuilt = rebuild_rooted(taxa5, ev1)
            assert serialize_newick(rebuilt) == serialize_newick(t)

    def test_subsplit_validation(self):
        with pytest.raises(ValueError):
            subsplit(0b011, 0b010)
        with pytest.raises(ValueError):
            subsplit(0b0, 0b1)


class TestSupport:
    def test_single_tree_is_certain(self, trees5):
        tree = trees5[3]
        model = SbnModel(build_support([tree]))
        assert model.log_prob_unrooted(tree) == pytest.approx(0.0, abs=1e-12)

    def test_idempotent_under_duplicates(self, trees5):
        one = build_support([trees5[0]])
        two = build_support([trees5[0], trees5[0]])
        assert one.root_subsplits == two.root_subsplits
        assert one.group_keys == two.group_keys
        assert one.splits == two.splits and one.psps == two.psps

    def test_complete_support_covers_all_trees(self, complete5, trees5):
        rng = np.random.default_rng(1)
        model = SbnModel(complete5, rng.normal(size=complete5.n_params))
        for t in trees5:
            assert np.isfinite(model.log_prob_unrooted(t))

    def test_taxa_mismatch_rejected(self, trees4, trees5):
        with pytest.raises(Exception):
            build_support([trees4[0], trees5[0]])

    def test_out_of_support_signalled(self, trees5):
        model = SbnModel(build_support([trees5[0]]))
        other = next(t for t in trees5
                     if splits_of(t) != splits_of(trees5[0]))
        with pytest.raises(SupportError):
            model.log_prob_unrooted(other)

    def test_psps_pair_split_with_adjacent_subsplit(self, taxa5):
        t = parse_newick("((A,B),C,(D,E));", taxa=taxa5)
        per_edge = tree_psps(t)
        assert len(per_edge) == len(t.edges)
        for split_mask, adjacent in per_edge:
            for w, z in adjacent:
                assert (w | z) in (split_mask,
                                   t.taxa.full_mask ^ split_mask)


class TestProbabilities:
    def test_rooting_sum_has_2n_minus_3_terms(self, complete5, trees5):
        model = SbnModel(complete5)
        lps, indexed = model._rooting_log_probs(
            trees5[0], model.group_log_norms())
        assert len(indexed) == 2 * 5 - 3
        assert all(idx is not None for idx in indexed)

    def test_uniform_phi_n4_is_one_third(self, complete4, trees4):
        model = SbnModel(complete4)
        ln = model.group_log_norms()
        for t in trees4:
            assert np.exp(model.log_prob_unrooted(t, ln)) == \
                pytest.approx(1 / 3, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_normalization_n5_random_phi(self, complete5, trees5, seed):
        rng = np.random.default_rng(seed)
        model = SbnModel(complete5, rng.normal(size=complete5.n_params))
        ln = model.group_log_norms()
        total = sum(np.exp(model.log_prob_unrooted(t, ln)) for t in trees5)
        assert abs(total - 1.0) < 1e-10

    def test_gradient_matches_finite_differences(self, complete5, trees5):
        rng = np.random.default_rng(3)
        model = SbnModel(complete5, rng.normal(size=complete5.n_params) * 0.5)
        tree = trees5[7]
        _, grad = model.log_prob_grad_phi(tree)
        h = 1e-6
        idxs = rng.choice(complete5.n_params, size=25, replace=False)
        fd = np.empty(len(idxs))
        for j, i in enumerate(idxs):
            model.phi[i] += h
            up = model.log_prob_unrooted(tree)
            model.phi[i] -= 2 * h
            dn = model.log_prob_unrooted(tree)
            model.phi[i] += h
            fd[j] = (up - dn) / (2 * h)
        assert rel_err(grad[idxs], fd, floor=1e-7) < 1e-4

    def test_grad_weighted_sum_is_zero(self, complete4, trees4):
        # sum over trees of p * grad log p = grad sum p = 0
        model = SbnModel(complete4)
        total = np.zeros(complete4.n_params)
        for t in trees4:
            lp, g = model.log_prob_grad_phi(t)
            total += np.exp(lp) * g
        assert np.abs(total).max() < 1e-12

    def test_unused_children_get_nonpositive_gradient(self, complete5, trees5):
        model = SbnModel(complete5)
        tree = trees5[0]
        _, grad = model.log_prob_grad_phi(tree)
        used = set()
        for idx in model._indexed_rootings(tree):
            used.update(i for _, i in idx)
        unused = np.setdiff1d(np.arange(complete5.n_params), sorted(used))
        assert np.all(grad[unused] <= 1e-15)


class TestSampling:
    def test_single_tree_support_always_same(self, trees5):
        tree = trees5[9]
        model = SbnModel(build_support([tree]))
        rng = np.random.default_rng(4)
        for _ in range(20):
            assert splits_of(model.sample_tree(rng)) == splits_of(tree)

    def test_samples_always_scoreable(self, complete5):
        rng = np.random.default_rng(5)
        model = SbnModel(complete5, rng.normal(size=complete5.n_params))
        ln = model.group_log_norms()
        for _ in range(50):
            t = model.sample_tree(rng)
            assert np.isfinite(model.log_prob_unrooted(t, ln))

    def test_uniform_n4_frequencies(self, complete4, trees4):
        model = SbnModel(complete4)
        rng = np.random.default_rng(6)
        counts = dict.fromkeys((splits_of(t) for t in trees4), 0)
        n = 3000
        for _ in range(n):
            counts[splits_of(model.sample_tree(rng))] += 1
        # 3 sigma of Binomial(n, 1/3)
        sigma = np.sqrt(n * (1 / 3) * (2 / 3))
        for c in counts.values():
            assert abs(c - n / 3) < 3 * sigma


class TestPersistence:
    def test_json_round_trip(self, complete5, trees5):
        rng = np.random.default_rng(7)
        model = SbnModel(complete5, rng.normal(size=complete5.n_params))
        back = SbnModel.from_json(model.to_json())
        for t in trees5[:5]:
            assert back.log_prob_unrooted(t) == \
                pytest.approx(model.log_prob_unrooted(t), abs=1e-12)

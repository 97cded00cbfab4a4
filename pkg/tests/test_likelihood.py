import numpy as np
import pytest

from oracles import brute_force_log_likelihood, rel_err
from phylotopo.likelihood import (
    Alignment,
    AlignmentError,
    LikelihoodError,
    encode_sequences,
    log_likelihood,
    log_likelihood_grad,
    log_prior,
    parse_fasta,
    simulate_alignment,
    transition_matrix,
    transition_matrix_derivative,
    write_fasta,
)
from phylotopo.trees import (
    TaxaSet,
    TreeTopology,
    enumerate_unrooted,
    parse_newick,
    random_unrooted,
)


class TestFasta:
    def test_small_alignment(self):
        aln = parse_fasta(">b\nACGTA\n>a\nTTGCA\n")
        assert aln.taxa.names == ("a", "b")
        assert aln.n_sites == 5

    def test_ambiguity_all_states(self):
        aln = parse_fasta(">a\nAN-\n>b\nACG\n>c\nACG\n")
        assert aln.codes[0, 1] == 15 and aln.codes[0, 2] == 15

    def test_iupac_partial(self):
        aln = parse_fasta(">a\nR\n>b\nA\n>c\nG\n")
        assert aln.codes[0, 0] == 0b0101  # A or G

    def test_case_normalized(self):
        aln = parse_fasta(">a\nacgt\n>b\nACGT\n>c\nACGT\n")
        assert np.array_equal(aln.codes[0], aln.codes[1])

    def test_multiline_sequences(self):
        aln = parse_fasta(">a\nAC\nGT\n>b\nACGT\n>c\nACGT\n")
        assert aln.n_sites == 4

    def test_length_mismatch(self):
        with pytest.raises(AlignmentError):
            parse_fasta(">a\nACG\n>b\nAC\n")

    def test_duplicate_header(self):
        with pytest.raises(AlignmentError):
            parse_fasta(">a\nAC\n>a\nGT\n")

    def test_empty_input(self):
        with pytest.raises(AlignmentError):
            parse_fasta("")

    def test_write_round_trip(self):
        rng = np.random.default_rng(0)
        taxa = TaxaSet(list("ABCD"))
        t = random_unrooted(taxa, rng)
        Y = simulate_alignment(t, np.full(5, 0.1), 20, rng)
        back = parse_fasta(write_fasta(Y))
        assert np.array_equal(back.codes, Y.codes)


class TestJukesCantor:
    def test_zero_time_identity(self):
        assert np.allclose(transition_matrix(0.0), np.eye(4))

    def test_infinite_time_stationary(self):
        assert np.allclose(transition_matrix(1e9), 0.25)

    @pytest.mark.parametrize("t", [0.0, 0.01, 0.3, 2.5])
    def test_rows_sum_to_one(self, t):
        P = transition_matrix(t)
        assert np.abs(P.sum(axis=1) - 1.0).max() < 1e-12

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            transition_matrix(-0.1)

    def test_derivative_matches_fd(self):
        t = 0.17
        h = 1e-6
        fd = (transition_matrix(t + h) - transition_matrix(t - h)) / (2 * h)
        assert np.abs(fd - transition_matrix_derivative(t)).max() < 1e-8


class TestPruning:
    def test_star_identical_site(self):
        t = parse_newick("(A,B,C);")
        Y = encode_sequences(t.taxa, {"A": "A", "B": "A", "C": "A"})
        assert abs(log_likelihood(t, np.zeros(3), Y) + np.log(4)) < 1e-12

    def test_star_contradiction_at_zero(self):
        t = parse_newick("(A,B,C);")
        Y = encode_sequences(t.taxa, {"A": "A", "B": "A", "C": "C"})
        with pytest.raises(LikelihoodError):
            log_likelihood(t, np.zeros(3), Y)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        for n in (4, 5):
            taxa = TaxaSet([f"x{i}" for i in range(n)])
            for _ in range(4):
                t = random_unrooted(taxa, rng)
                q = rng.uniform(0.01, 0.8, len(t.edges))
                Y = simulate_alignment(t, q, 3, rng)
                got = log_likelihood(t, q, Y)
                want = brute_force_log_likelihood(t, q, Y)
                assert abs(got - want) < 1e-10 * abs(want)

    def test_root_choice_invariance(self):
        rng = np.random.default_rng(10)
        taxa = TaxaSet([f"x{i}" for i in range(6)])
        t = random_unrooted(taxa, rng)
        q = rng.uniform(0.02, 0.5, len(t.edges))
        Y = simulate_alignment(t, q, 40, rng)
        leaf_taxon = {u: t.taxon[u] for u in t.leaves}
        vals = []
        for r in t.interior:
            t2 = TreeTopology(t.taxa, list(t.edges), leaf_taxon,
                              rooted=False, root_id=r)
            vals.append(log_likelihood(t2, q, Y))
        assert max(vals) - min(vals) < 1e-9

    def test_per_site_likelihoods_bounded(self):
        rng = np.random.default_rng(11)
        taxa = TaxaSet(list("ABCDE"))
        t = random_unrooted(taxa, rng)
        q = rng.uniform(0.05, 0.5, len(t.edges))
        Y = simulate_alignment(t, q, 30, rng)
        assert np.isfinite(log_likelihood(t, q, Y))
        single = encode_sequences(
            t.taxa, {n: "A" for n in t.taxa.names})
        ll = log_likelihood(t, q, single)
        assert ll < 0.0  # per-site likelihood in (0, 1]

    def test_taxa_mismatch_rejected(self):
        t = parse_newick("(A,B,C);")
        other = encode_sequences(TaxaSet(list("XYZ")),
                                 {"X": "A", "Y": "A", "Z": "A"})
        with pytest.raises(AlignmentError):
            log_likelihood(t, np.zeros(3), other)

    def test_branch_vector_length_checked(self):
        t = parse_newick("(A,B,C);")
        Y = encode_sequences(t.taxa, {"A": "A", "B": "A", "C": "A"})
        with pytest.raises(ValueError):
            log_likelihood(t, np.zeros(2), Y)


class TestGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        taxa = TaxaSet(list("ABCDE"))
        for t in enumerate_unrooted(taxa):
            q = rng.uniform(0.05, 0.6, len(t.edges))
            Y = simulate_alignment(t, q, 10, rng)
            _, g = log_likelihood_grad(t, q, Y)
            h = 1e-5
            fd = np.empty_like(q)
            for e in range(len(q)):
                qp, qm = q.copy(), q.copy()
                qp[e] += h
                qm[e] -= h
                fd[e] = (log_likelihood(t, qp, Y)
                         - log_likelihood(t, qm, Y)) / (2 * h)
            assert rel_err(g, fd, floor=1e-6) < 1e-4

    def test_symmetric_tree_symmetric_grads(self):
        t = parse_newick("(A,B,C);")
        Y = encode_sequences(t.taxa, {"A": "A", "B": "A", "C": "A"})
        q = np.full(3, 0.2)
        _, g = log_likelihood_grad(t, q, Y)
        assert np.abs(g - g[0]).max() < 1e-12

    def test_duplicated_sites_scale_gradient(self):
        rng = np.random.default_rng(13)
        taxa = TaxaSet(list("ABCD"))
        t = random_unrooted(taxa, rng)
        q = rng.uniform(0.05, 0.4, len(t.edges))
        one = simulate_alignment(t, q, 1, rng)
        m = 7
        rep = Alignment(taxa=one.taxa, codes=np.repeat(one.codes, m, axis=1))
        _, g1 = log_likelihood_grad(t, q, one)
        _, gm = log_likelihood_grad(t, q, rep)
        assert np.allclose(gm, m * g1, rtol=1e-12)


class TestPrior:
    def test_eight_taxon_value(self):
        taxa = TaxaSet([f"T{i}" for i in range(8)])
        t = next(iter(enumerate_unrooted(taxa)))
        got = log_prior(t, np.zeros(13))
        assert abs(got - (-np.log(10395) + 13 * np.log(10))) < 1e-12

    def test_exponential_density_slope(self):
        taxa = TaxaSet(list("ABCD"))
        rng = np.random.default_rng(14)
        t = random_unrooted(taxa, rng)
        q = np.full(5, 0.1)
        base = log_prior(t, q)
        q2 = q.copy()
        q2[0] *= 2
        assert abs((log_prior(t, q2) - base) - (-10 * q[0])) < 1e-12

    def test_three_taxon_topology_term_zero(self):
        t = parse_newick("(A,B,C);")
        got = log_prior(t, np.zeros(3))
        assert abs(got - 3 * np.log(10)) < 1e-12

    def test_negative_branch_rejected(self):
        t = parse_newick("(A,B,C);")
        with pytest.raises(ValueError):
            log_prior(t, np.array([0.1, -0.2, 0.3]))

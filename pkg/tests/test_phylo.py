from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from scipy import integrate, stats

from phylo import (
    TIP_TABLE,
    GammaRates,
    GtrParams,
    MalformedNewick,
    PhyloError,
    RateMatrix,
    TaxonMismatch,
    all_topologies,
    count_rooted_trees,
    count_unrooted_trees,
    expand_exchangeabilities,
    log10_unrooted_trees,
    log_likelihood,
    nni,
    parse_newick,
    random_addition_tree,
    rate_matrix,
    simulate_alignment,
    transition_probs,
    write_newick,
)
from seqio import Alignment
from tests.conftest import FOUR_TAXON_NEWICK

SKEWED = GtrParams((1.0, 2.0, 0.5, 1.5, 3.0, 1.0), (0.1, 0.2, 0.3, 0.4))


def brute_force_log_likelihood(tree, alignment, params, rates=(1.0,)):
    """Sum over every internal-node state assignment, site by site."""
    model = RateMatrix(params)
    n = tree.n_leaves
    root = n
    internal = list(range(n, tree.n_nodes))
    order = [step for step in tree.postorder(root) if step[1] >= 0]
    total = 0.0
    for site in range(alignment.n_sites):
        tips = {leaf: TIP_TABLE[ord(alignment.row(tree.leaves[leaf])[site])] for leaf in range(n)}
        likelihood = 0.0
        for rate in rates:
            p = model.probabilities(tree.lengths * rate)
            for states in itertools.product(range(4), repeat=len(internal)):
                state = dict(zip(internal, states))
                term = model.freqs[state[root]]
                for node, parent, edge in order:
                    if node < n:
                        term *= float(p[edge][state[parent]] @ tips[node])
                    else:
                        term *= p[edge][state[parent], state[node]]
                likelihood += term / len(rates)
        total += math.log(likelihood)
    return total


# ---- Newick -----------------------------------------------------------------


def test_parse_four_taxon_tree(four_taxon_tree):
    assert four_taxon_tree.leaves == ("A", "B", "C", "D")
    assert four_taxon_tree.n_edges == 5
    assert four_taxon_tree.n_nodes == 6
    assert four_taxon_tree.is_binary
    assert four_taxon_tree.tree_length == pytest.approx(1.05)
    assert four_taxon_tree.splits() == frozenset({0b1100})


def test_round_trip_preserves_topology_and_lengths(four_taxon_tree):
    again = parse_newick(write_newick(four_taxon_tree))
    assert again.same_topology(four_taxon_tree)
    original = four_taxon_tree.split_lengths()
    for mask, length in again.split_lengths().items():
        assert length == pytest.approx(original[mask], rel=1e-12)


def test_bifurcating_root_is_collapsed():
    tree = parse_newick("((A:0.1,B:0.2):0.05,(C:0.3,D:0.4):0.15);")
    assert tree.n_edges == 5
    internal = tree.internal_edges[0]
    assert float(tree.lengths[internal]) == pytest.approx(0.2)


def test_taxa_order_and_translate():
    tree = parse_newick("((1:0.1,2:0.1):0.1,3:0.1,4:0.1);", taxa=["D", "C", "B", "A"], translate={"1": "A", "2": "B", "3": "C", "4": "D"})
    assert tree.leaves == ("D", "C", "B", "A")


def test_support_labels_are_dropped():
    tree = parse_newick("((A:0.1,B:0.2)0.950:0.05,C:0.3,D:0.4);")
    assert tree.n_leaves == 4


@pytest.mark.parametrize(
    "text",
    [
        "((A:0.1,B:0.2):0.05,C:0.3;",
        "((A:0.1,B:0.2):0.05,C:0.3,D:0.4)",
        "((A,B):1,C:1,D:1);",
        "((A:0.1,B:-0.2):0.05,C:0.3,D:0.4);",
        "((A:0.1,A:0.2):0.05,C:0.3,D:0.4);",
        "((A:0.1,B:0.2):0.05,C:0.3,D:0.4));",
    ],
)
def test_malformed_newick(text):
    with pytest.raises(MalformedNewick):
        parse_newick(text)


def test_malformed_newick_reports_position():
    with pytest.raises(MalformedNewick) as info:
        parse_newick("((A:0.1,B:x):0.05,C:0.3,D:0.4);")
    assert info.value.position == 10


def test_tree_dict_round_trip(four_taxon_tree):
    again = type(four_taxon_tree).from_dict(four_taxon_tree.to_dict())
    assert again.same_topology(four_taxon_tree)
    assert np.array_equal(again.lengths, four_taxon_tree.lengths)


# ---- Topologies -------------------------------------------------------------


@pytest.mark.parametrize("n, expected", [(3, 1), (4, 3), (5, 15), (6, 105), (10, 2_027_025)])
def test_count_unrooted_trees(n, expected):
    assert count_unrooted_trees(n) == expected


def test_count_recurrence():
    for n in range(4, 40):
        assert count_unrooted_trees(n) == count_unrooted_trees(n - 1) * (2 * n - 5)


def test_count_needs_three_taxa():
    with pytest.raises(PhyloError):
        count_unrooted_trees(2)


def test_rooted_count_matches_one_more_taxon():
    for n in range(3, 12):
        assert count_rooted_trees(n) == count_unrooted_trees(n + 1)


def test_log10_count_matches_exact():
    for n in (5, 10, 50, 200):
        assert log10_unrooted_trees(n) == pytest.approx(math.log10(count_unrooted_trees(n)), rel=1e-10)


@pytest.mark.parametrize("n", [4, 5, 6, 7])
def test_enumeration_matches_count(n):
    taxa = [f"t{i}" for i in range(n)]
    topologies = {tree.splits() for tree in all_topologies(taxa)}
    assert len(topologies) == count_unrooted_trees(n)


def test_nni_changes_exactly_one_split():
    tree = parse_newick("((A:0.1,B:0.2):0.05,(C:0.3,D:0.4):0.1,(E:0.2,F:0.1):0.07);")
    edge = tree.internal_edges[0]
    results = set()
    for choice in (0, 1):
        moved = nni(tree, edge, choice)
        assert len(tree.splits() - moved.splits()) == 1
        assert np.array_equal(moved.lengths, tree.lengths)
        results.add(moved.splits())
    assert len(results) == 2


def test_nni_rejects_leaf_edge(four_taxon_tree):
    leaf_edge = next(i for i in range(four_taxon_tree.n_edges) if i not in four_taxon_tree.internal_edges)
    with pytest.raises(PhyloError):
        nni(four_taxon_tree, leaf_edge, 0)


def test_random_addition_tree_is_binary():
    tree = random_addition_tree([f"t{i}" for i in range(12)], np.random.default_rng(3))
    assert tree.is_binary
    assert tree.n_edges == 2 * 12 - 3


# ---- Substitution model -----------------------------------------------------


def test_jukes_cantor_rate_matrix():
    q = rate_matrix(GtrParams.jukes_cantor())
    expected = np.full((4, 4), 1.0 / 3.0)
    np.fill_diagonal(expected, -1.0)
    assert np.allclose(q, expected, atol=1e-15)


def test_rate_matrix_rows_and_balance():
    q = rate_matrix(SKEWED)
    freqs = np.asarray(SKEWED.freqs)
    assert np.allclose(q.sum(axis=1), 0.0, atol=1e-14)
    flux = freqs[:, None] * q
    assert np.allclose(flux, flux.T, atol=1e-15)
    assert -float(np.dot(freqs, np.diag(q))) == pytest.approx(1.0, abs=1e-14)


def test_jukes_cantor_transition_closed_form():
    p = transition_probs(RateMatrix(GtrParams.jukes_cantor()), 0.1)
    same = 0.25 + 0.75 * math.exp(-4 * 0.1 / 3)
    different = 0.25 - 0.25 * math.exp(-4 * 0.1 / 3)
    assert p[0, 0] == pytest.approx(same, abs=1e-12)
    assert p[0, 1] == pytest.approx(different, abs=1e-12)


def test_transition_identity_at_zero():
    assert np.array_equal(transition_probs(RateMatrix(SKEWED), 0.0), np.eye(4))


def test_transition_stationary_at_large_t():
    p = transition_probs(RateMatrix(SKEWED), 1000.0)
    assert np.allclose(p, np.tile(SKEWED.freqs, (4, 1)), atol=1e-9)


def test_transition_semigroup_and_stochastic():
    model = RateMatrix(SKEWED)
    rng = np.random.default_rng(11)
    for _ in range(20):
        s, t = rng.exponential(0.5, size=2)
        ps, pt, pst = (transition_probs(model, x) for x in (s, t, s + t))
        assert np.allclose(ps @ pt, pst, atol=1e-10)
        assert np.allclose(pst.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((pst >= 0) & (pst <= 1))


def test_transition_rejects_bad_arguments():
    model = RateMatrix(SKEWED)
    with pytest.raises(PhyloError):
        transition_probs(model, -1.0)
    with pytest.raises(PhyloError):
        transition_probs(model, 1.0, rate=0.0)


def test_gtr_validation():
    with pytest.raises(PhyloError):
        GtrParams((1.0,) * 6, (0.3, 0.3, 0.3, 0.3))
    with pytest.raises(PhyloError):
        GtrParams((1.0, 1.0, 1.0, 1.0, 1.0, 0.0), (0.25,) * 4)


def test_expand_exchangeabilities():
    assert expand_exchangeabilities(2, (1.0, 4.0)) == (1.0, 4.0, 1.0, 1.0, 4.0, 1.0)
    assert expand_exchangeabilities(1, ()) == (1.0,) * 6


@pytest.mark.parametrize("alpha", [0.2, 0.5, 1.0, 2.5, 10.0])
def test_gamma_categories_match_quadrature(alpha):
    rates = GammaRates(alpha)
    assert len(rates.rates) == 4
    assert sum(rates.rates) / 4 == pytest.approx(1.0, abs=1e-12)
    dist = stats.gamma(a=alpha, scale=1.0 / alpha)
    cuts = [0.0] + [dist.ppf(k / 4) for k in (1, 2, 3)] + [np.inf]
    for k in range(4):
        mean, _ = integrate.quad(lambda x: x * dist.pdf(x), cuts[k], cuts[k + 1], epsabs=0.0, epsrel=1e-10, limit=200)
        assert rates.rates[k] == pytest.approx(4 * mean, rel=1e-6)


def test_gamma_rejects_non_positive_shape():
    with pytest.raises(PhyloError):
        GammaRates(0.0)


# ---- Likelihood -------------------------------------------------------------


def test_pruning_matches_brute_force_on_four_taxa(four_taxon_tree):
    alignment = Alignment(("A", "B", "C", "D"), ("AC", "AG", "CT", "CA"))
    expected = brute_force_log_likelihood(four_taxon_tree, alignment, GtrParams.jukes_cantor())
    found = log_likelihood(four_taxon_tree, alignment, GtrParams.jukes_cantor(), GammaRates.equal())
    assert found == pytest.approx(expected, rel=1e-10)


def test_pruning_matches_brute_force_on_every_five_taxon_tree():
    taxa = ("A", "B", "C", "D", "E")
    alignment = Alignment(taxa, ("ACR", "AG-", "CTY", "GTA", "T?N"))
    gamma = GammaRates(0.7)
    rng = np.random.default_rng(5)
    topologies = list(all_topologies(taxa))
    assert len(topologies) == 15
    for tree in topologies:
        tree = tree.with_lengths(rng.uniform(0.02, 0.5, size=tree.n_edges))
        expected = brute_force_log_likelihood(tree, alignment, SKEWED, gamma.rates)
        assert log_likelihood(tree, alignment, SKEWED, gamma) == pytest.approx(expected, rel=1e-10)


def test_virtual_root_invariance(small_alignment):
    tree = parse_newick("((A:0.08,B:0.12):0.06,(C:0.1,D:0.07):0.05,(E:0.09,F:0.11):0.04);")
    gamma = GammaRates(0.5)
    values = [log_likelihood(tree, small_alignment, SKEWED, gamma, root=node) for node in range(tree.n_nodes)]
    assert max(values) - min(values) <= 1e-10


def test_missing_columns_contribute_nothing(four_taxon_tree):
    alignment = Alignment(("A", "B", "C", "D"), ("?-", "??", "-?", "??"))
    assert log_likelihood(four_taxon_tree, alignment, SKEWED, GammaRates(1.0)) == pytest.approx(0.0, abs=1e-12)


def test_scaling_keeps_large_trees_finite():
    taxa = [f"t{i}" for i in range(120)]
    tree = random_addition_tree(taxa, np.random.default_rng(1), lambda rng, k: np.full(k, 2.0))
    alignment = simulate_alignment(tree, SKEWED, GammaRates.equal(), 20, seed=2)
    assert math.isfinite(log_likelihood(tree, alignment, SKEWED, GammaRates.equal()))


def test_taxon_mismatch(four_taxon_tree):
    alignment = Alignment(("A", "B", "C", "E"), ("A", "C", "G", "T"))
    with pytest.raises(TaxonMismatch) as info:
        log_likelihood(four_taxon_tree, alignment, SKEWED, GammaRates.equal())
    assert info.value.missing == ("E",)
    assert info.value.extra == ("D",)


# ---- Simulation -------------------------------------------------------------


def test_simulate_zero_sites(four_taxon_tree):
    alignment = simulate_alignment(four_taxon_tree, SKEWED, GammaRates.equal(), 0, seed=1)
    assert alignment.taxa == ("A", "B", "C", "D")
    assert alignment.n_sites == 0


def test_simulate_is_deterministic(four_taxon_tree):
    first = simulate_alignment(four_taxon_tree, SKEWED, GammaRates(0.5), 200, seed=3)
    assert simulate_alignment(four_taxon_tree, SKEWED, GammaRates(0.5), 200, seed=3) == first
    assert simulate_alignment(four_taxon_tree, SKEWED, GammaRates(0.5), 200, seed=4) != first


def test_simulate_two_taxa_mismatch_rate():
    tree = parse_newick("(A:0.1,B:0.2);")
    n = 100_000
    alignment = simulate_alignment(tree, GtrParams.jukes_cantor(), GammaRates.equal(), n, seed=99)
    mismatches = sum(a != b for a, b in zip(*alignment.rows))
    expected = 0.75 * (1.0 - math.exp(-4.0 * 0.3 / 3.0))
    sigma = math.sqrt(expected * (1 - expected) / n)
    assert abs(mismatches / n - expected) <= 4 * sigma


def test_simulated_root_frequencies():
    tree = parse_newick(FOUR_TAXON_NEWICK)
    alignment = simulate_alignment(tree, SKEWED, GammaRates.equal(), 20_000, seed=8)
    row = alignment.row("A")
    observed = np.array([row.count(base) for base in "ACGT"]) / len(row)
    assert np.allclose(observed, SKEWED.freqs, atol=0.02)

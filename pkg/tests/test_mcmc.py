from __future__ import annotations

import math
import time

import numpy as np
import pytest

from consensus import Split, asdsf, burn_in_filter, majority_rule_consensus, read_tree_trace
from mbscript import McmcSettings, ModelSpec
from mcmc import (
    PARAMETER_HEADER,
    ChainState,
    CorruptCheckpoint,
    DigestMismatch,
    DirectorySink,
    McmcError,
    McmcRun,
    MemorySink,
    ProposalKind,
    SinkFailure,
    chain_rng,
    dirichlet_move,
    heat,
    multiplier,
    proposal_mix,
    propose,
    read_checkpoint,
    run_mcmc,
    settings_digest,
    trace_file_names,
)
from phylo import GammaRates, GtrParams, parse_newick, random_addition_tree, simulate_alignment
from seqio import Alignment


def parameter_rows(data: bytes):
    lines = data.decode().splitlines()
    return [line.split("\t") for line in lines[2:]]


def test_trace_file_names():
    assert trace_file_names("x", 2) == ("x.run1.p", "x.run1.t", "x.run2.p", "x.run2.t")


def test_heating_ladder():
    temperatures = [heat(slot, 0.1) for slot in range(4)]
    assert temperatures[0] == 1.0
    assert all(a > b for a, b in zip(temperatures, temperatures[1:]))
    assert temperatures[3] == pytest.approx(1 / 1.3)


def test_zero_generations_writes_only_the_initial_sample(small_alignment, jc_model):
    sink = MemorySink()
    settings = McmcSettings(nruns=1, ngen=0, samplefreq=10, nchains=2)
    summary = run_mcmc(small_alignment, jc_model, settings, sink)
    rows = parameter_rows(sink.read("phylogrid.run1.p"))
    assert [row[0] for row in rows] == ["0"]
    assert summary.generation == 0
    assert len(read_tree_trace(sink.read("phylogrid.run1.t"))) == 1


def test_trace_layout(small_alignment, jc_model, quick_settings):
    sink = MemorySink()
    summary = run_mcmc(small_alignment, jc_model, quick_settings, sink)
    assert summary.trace_files == trace_file_names("phylogrid", 2)
    assert sorted(sink.names()) == sorted(summary.trace_files)
    lines = sink.read("phylogrid.run1.p").decode().splitlines()
    assert lines[0] == f"[ID: {summary.digest}]"
    assert lines[1] == PARAMETER_HEADER
    generations = [int(row[0]) for row in parameter_rows(sink.read("phylogrid.run1.p"))]
    assert generations == list(range(0, 101, 10))
    for row in parameter_rows(sink.read("phylogrid.run2.p")):
        assert len(row) == 14
        assert all(len(value.split(".")[1]) == 6 for value in row[1:])
    samples = read_tree_trace(sink.read("phylogrid.run1.t"))
    assert [sample.generation for sample in samples] == generations
    assert samples[0].tree.leaves == small_alignment.taxa
    assert sink.read("phylogrid.run1.t").endswith(b"end;\n")


def test_same_seed_gives_identical_traces(small_alignment, jc_model, quick_settings):
    first, second = MemorySink(), MemorySink()
    run_mcmc(small_alignment, jc_model, quick_settings, first)
    run_mcmc(small_alignment, jc_model, quick_settings, second)
    assert first.snapshot() == second.snapshot()


def test_different_seed_changes_traces(small_alignment, jc_model, quick_settings):
    first, second = MemorySink(), MemorySink()
    run_mcmc(small_alignment, jc_model, quick_settings, first)
    run_mcmc(small_alignment, jc_model, quick_settings.model_copy(update={"seed": 43}), second)
    assert first.read("phylogrid.run1.p") != second.read("phylogrid.run1.p")


def test_extra_blocks_extend_the_analysis(small_alignment, jc_model):
    sink = MemorySink()
    settings = McmcSettings(nruns=1, ngen=20, samplefreq=10, nchains=1)
    summary = run_mcmc(small_alignment, jc_model, settings, sink, blocks=3)
    assert summary.generation == 60
    assert parameter_rows(sink.read("phylogrid.run1.p"))[-1][0] == "60"


def test_needs_three_taxa(jc_model, quick_settings):
    alignment = Alignment(("A", "B"), ("AC", "AG"))
    with pytest.raises(McmcError):
        McmcRun.start(alignment, jc_model, quick_settings, MemorySink())


def test_checkpoint_resume_is_byte_identical(small_alignment, quick_settings):
    model = ModelSpec()
    reference = MemorySink()
    run_mcmc(small_alignment, model, quick_settings, reference)

    sink = MemorySink()
    run = McmcRun.start(small_alignment, model, quick_settings, sink)
    run.advance(35)
    saved = run.checkpoint()
    run.advance(70)

    resumed = McmcRun.resume(saved, small_alignment, model, quick_settings, sink)
    assert resumed.generation == 35
    resumed.finish()
    assert sink.snapshot() == reference.snapshot()


def test_resume_from_a_snapshot_of_the_files(small_alignment, jc_model, quick_settings):
    reference = MemorySink()
    run_mcmc(small_alignment, jc_model, quick_settings, reference)

    sink = MemorySink()
    run = McmcRun.start(small_alignment, jc_model, quick_settings, sink)
    run.advance(50)
    saved, files = run.checkpoint(), sink.snapshot()

    copy = MemorySink(files)
    McmcRun.resume(saved, small_alignment, jc_model, quick_settings, copy).finish()
    assert copy.snapshot() == reference.snapshot()


def test_resume_with_other_settings_is_rejected(small_alignment, jc_model, quick_settings):
    sink = MemorySink()
    run = McmcRun.start(small_alignment, jc_model, quick_settings, sink)
    run.advance(20)
    saved = run.checkpoint()
    altered = quick_settings.model_copy(update={"ngen": 200})
    with pytest.raises(DigestMismatch):
        McmcRun.resume(saved, small_alignment, jc_model, altered, sink)


def test_truncated_checkpoint_is_corrupt(small_alignment, jc_model, quick_settings):
    run = McmcRun.start(small_alignment, jc_model, quick_settings, MemorySink())
    saved = run.checkpoint()
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(saved[:-10])
    with pytest.raises(CorruptCheckpoint):
        McmcRun.resume(b"XXXX" + saved[4:], small_alignment, jc_model, quick_settings, MemorySink())


def test_checkpoint_header(small_alignment, jc_model, quick_settings):
    run = McmcRun.start(small_alignment, jc_model, quick_settings, MemorySink())
    run.advance(30)
    digest, generation, header, states = read_checkpoint(run.checkpoint())
    assert digest == settings_digest(small_alignment, jc_model, quick_settings)
    assert generation == 30
    assert len(states) == quick_settings.nruns * quick_settings.nchains
    assert set(header["offsets"]) == set(run.trace_files)


def test_directory_sink(tmp_path, small_alignment, jc_model, quick_settings):
    memory = MemorySink()
    run_mcmc(small_alignment, jc_model, quick_settings, memory)
    run_mcmc(small_alignment, jc_model, quick_settings, DirectorySink(tmp_path))
    for name, data in memory.snapshot().items():
        assert (tmp_path / name).read_bytes() == data


def test_sink_errors_surface_as_sink_failure(small_alignment, jc_model, quick_settings):
    class BrokenSink(MemorySink):
        def append(self, name, data):
            raise OSError("disk full")

    with pytest.raises(SinkFailure):
        run_mcmc(small_alignment, jc_model, quick_settings, BrokenSink())


def test_acceptance_bookkeeping(small_alignment, quick_settings):
    summary = run_mcmc(small_alignment, ModelSpec(), quick_settings, MemorySink())
    tried = sum(count for kind, (count, _) in summary.acceptance.items() if kind != "swap")
    assert tried == quick_settings.nruns * quick_settings.nchains * quick_settings.ngen
    assert 0.0 <= summary.acceptance_rate("branch_multiplier") <= 1.0


# ---- Proposals --------------------------------------------------------------


def test_multiplier_identity_point():
    assert multiplier(0.3, 0.5, 1.0) == (0.3, 0.0)


def test_multiplier_hastings_ratio():
    value, log_h = multiplier(2.0, 0.9, 2.0 * math.log(1.1))
    assert log_h == pytest.approx(math.log(value / 2.0))


def test_nni_proposal_keeps_lengths(four_taxon_tree):
    state = ChainState(four_taxon_tree, (), (0.25,) * 4, 1.0, 1)
    candidate, log_h = propose(state, ProposalKind.NNI, np.random.default_rng(0))
    assert log_h == 0.0
    assert candidate.tree.splits() != four_taxon_tree.splits()
    assert np.array_equal(candidate.tree.lengths, four_taxon_tree.lengths)
    assert math.isnan(candidate.log_prior)


def test_branch_proposal_changes_one_edge(four_taxon_tree):
    state = ChainState(four_taxon_tree, (), (0.25,) * 4, 1.0, 1)
    candidate, log_h = propose(state, ProposalKind.BRANCH, np.random.default_rng(1))
    changed = np.flatnonzero(candidate.tree.lengths != four_taxon_tree.lengths)
    assert len(changed) == 1
    edge = changed[0]
    assert log_h == pytest.approx(math.log(candidate.tree.lengths[edge] / four_taxon_tree.lengths[edge]))


def test_dirichlet_move_stays_on_simplex():
    rng = np.random.default_rng(4)
    for _ in range(50):
        values, log_h = dirichlet_move((0.1, 0.2, 0.3, 0.4), rng)
        assert values is not None
        assert sum(values) == pytest.approx(1.0, abs=1e-12)
        assert math.isfinite(log_h)


def test_proposal_mix_follows_model():
    kinds, weights = proposal_mix(ModelSpec(nst=1, rates="equal"), 6)
    assert ProposalKind.ALPHA not in kinds
    assert ProposalKind.RATES not in kinds
    assert weights.sum() == pytest.approx(1.0)
    kinds, _ = proposal_mix(ModelSpec(), 3)
    assert ProposalKind.NNI not in kinds


def test_chain_streams_are_independent_of_order():
    first = chain_rng(5, 1, 2).random(3)
    chain_rng(5, 0, 0).random(10)
    assert np.array_equal(chain_rng(5, 1, 2).random(3), first)


# ---- Statistical acceptance -------------------------------------------------


def batch_standard_error(values: np.ndarray, batches: int = 20) -> float:
    means = np.array([chunk.mean() for chunk in np.array_split(values, batches)])
    return float(means.std(ddof=1) / math.sqrt(batches))


@pytest.mark.slow
def test_prior_recovery():
    alignment = Alignment(("A", "B", "C", "D", "E"), ("AC", "AG", "CT", "CA", "GG"))
    settings = McmcSettings(nruns=1, ngen=200_000, samplefreq=50, nchains=1, seed=11)
    sink = MemorySink()
    run_mcmc(alignment, ModelSpec(nst=6, rates="gamma"), settings, sink, prior_only=True)
    rows = parameter_rows(sink.read("phylogrid.run1.p"))[400:]
    alpha = np.array([float(row[3]) for row in rows])
    branch = np.array([float(row[2]) for row in rows]) / 7.0
    assert abs(alpha.mean() - 1.0) <= 3 * batch_standard_error(alpha, batches=40)
    assert abs(branch.mean() - 0.1) <= 3 * batch_standard_error(branch, batches=40)


RECOVERY_TREE = "(((A:0.1,B:0.1):0.08,(C:0.1,D:0.1):0.08):0.08,((E:0.1,F:0.1):0.08,(G:0.1,H:0.1):0.08):0.08);"


@pytest.fixture(scope="module")
def recovery_analysis():
    truth = parse_newick(RECOVERY_TREE)
    model = GtrParams((1.0, 3.0, 0.8, 1.2, 3.5, 1.0), (0.3, 0.2, 0.2, 0.3))
    alignment = simulate_alignment(truth, model, GammaRates(1.0), 1000, seed=21)
    settings = McmcSettings(nruns=2, ngen=100_000, samplefreq=100, nchains=4, seed=3)
    sink = MemorySink()
    run_mcmc(alignment, ModelSpec(nst=6, rates="gamma"), settings, sink)
    runs = [read_tree_trace(sink.read(f"phylogrid.run{i}.t")) for i in (1, 2)]
    return truth, runs


@pytest.mark.slow
def test_consensus_recovers_true_topology(recovery_analysis):
    truth, runs = recovery_analysis
    pooled = [sample for run in runs for sample in burn_in_filter(run, 0.25)]
    consensus = majority_rule_consensus(pooled)
    assert consensus.tree.same_topology(truth)
    for mask in truth.splits():
        assert consensus.splits[Split(mask, truth.n_leaves)].frequency >= 0.90
    assert min(consensus.clade_support.values()) >= 0.90


@pytest.mark.slow
def test_run_disagreement_shrinks_with_length(recovery_analysis):
    _, runs = recovery_analysis

    def up_to(generation):
        return [[sample for sample in run if sample.generation <= generation] for run in runs]

    early, late = asdsf(*up_to(10_000)), asdsf(*up_to(100_000))
    assert late < early


@pytest.mark.slow
def test_fifty_taxon_throughput(record_property):
    taxa = [f"t{i:02d}" for i in range(50)]
    tree = random_addition_tree(taxa, np.random.default_rng(50))
    alignment = simulate_alignment(tree, GtrParams.jukes_cantor(), GammaRates(0.5), 300, seed=50)
    settings = McmcSettings(nruns=1, ngen=1000, samplefreq=100, nchains=4, seed=50)
    started = time.perf_counter()
    summary = run_mcmc(alignment, ModelSpec(), settings, MemorySink())
    elapsed = time.perf_counter() - started
    record_property("mcmc_seconds", round(elapsed, 2))
    assert summary.generation == 1000
    assert elapsed < 60.0

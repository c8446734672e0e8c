from __future__ import annotations

import threading

import numpy as np
import pytest
from pydantic import ValidationError

from consensus import read_tree_trace
from gridsim import Grid, JobStatus, Resource
from mbscript import McmcSettings, parse_script
from mcmc import MemorySink, run_mcmc
from seqio import MalformedFile, SeqFileFormat, parse_alignment, write_fasta, write_nexus
from stage_hooks import HookResult, HooksManager, StageBlocked, get_hooks_manager
from workflow import (
    STAGES,
    JobNotDone,
    JobParams,
    MrBayesParams,
    StageFailed,
    UnknownRun,
    WorkflowInputs,
    WorkflowRun,
    default_poll_interval,
    load_run,
    parse_manifest,
    poll_job,
    render_manifest,
    run_workflow,
)

SETTINGS = McmcSettings(nruns=2, ngen=100, samplefreq=10, nchains=2, seed=42)


@pytest.fixture
def inputs(small_alignment, jc_model):
    return WorkflowInputs(
        mrbayes_params=MrBayesParams(model=jc_model, mcmc=SETTINGS),
        job_params=JobParams(name="six taxa", description="simulated data"),
        seq_file=write_fasta(small_alignment),
        seq_file_format="fasta",
    )


def test_successful_run(grid, inputs, small_alignment, jc_model):
    run = run_workflow(inputs, grid, run_id="r1", poll_interval=10)
    assert run.status == "Succeeded"
    assert [stage.name for stage in run.stage_log] == list(STAGES)
    assert all(stage.outcome == "Succeeded" for stage in run.stage_log)
    polled = run.stage_log[3]
    assert (polled.start, polled.end, polled.polls) == (0.0, 100.0, 10)
    assert grid.status(run.job_id) is JobStatus.DONE

    storage = grid.storage
    assert storage.get("runs/r1/stage/formatFileToNexus") == write_nexus(small_alignment)
    script = parse_script(storage.get("runs/r1/stage/InputParams2runMB"))
    assert script.execute_path == "formatFileToNexus"
    assert script.mcmc == SETTINGS
    assert storage.get("runs/r1/stage/JobParams2jdl").startswith(b"JobName=six taxa\n")

    reference = MemorySink()
    run_mcmc(small_alignment, jc_model, SETTINGS, reference)
    for name, data in reference.snapshot().items():
        assert storage.get(f"runs/r1/output/{name}") == data

    for key in run.output_refs:
        assert storage.digest(key) == run.digests[key]
    assert "runs/r1/output/phylogrid.con.tre" in run.output_refs
    assert run.asdsf is not None and 0.0 <= run.asdsf <= 0.5
    (consensus,) = read_tree_trace(storage.get("runs/r1/output/phylogrid.con.tre"))
    assert consensus.tree.leaves == small_alignment.taxa
    splits = storage.get("runs/r1/output/phylogrid.splits.tsv").decode().splitlines()
    assert splits[0] == "# samples=18 burnin=0.25"
    assert splits[1].startswith("# asdsf=")


def test_manifest_is_stored_and_reloads(grid, inputs):
    run = run_workflow(inputs, grid, run_id="r1", poll_interval=10)
    loaded = load_run(grid.storage, "r1")
    assert loaded.status == "Succeeded"
    assert loaded.job_id == run.job_id
    assert loaded.description == "simulated data"
    assert loaded.output_refs == run.output_refs
    assert loaded.digests == run.digests
    assert [(s.name, s.start, s.end, s.polls) for s in loaded.stage_log] == [
        (s.name, s.start, s.end, s.polls) for s in run.stage_log
    ]
    assert loaded.asdsf == pytest.approx(run.asdsf, abs=1e-6)


def test_rerun_with_same_seed_gives_identical_digests(grid, inputs):
    first = run_workflow(inputs, grid, run_id="ra", poll_interval=25)
    second = run_workflow(inputs, grid, run_id="rb", poll_interval=25)
    assert sorted(first.digests.values()) == sorted(second.digests.values())
    jdl = grid.storage.get("runs/ra/stage/JobParams2jdl").decode()
    assert "InputRef=stage/formatFileToNexus" in jdl
    assert "OutputRef=output/phylogrid.run1.t" in jdl
    assert "runs/" not in jdl
    assert grid.job(second.job_id).descriptor.arguments == "runs/rb/stage/InputParams2runMB"


def test_unknown_run(storage):
    with pytest.raises(UnknownRun):
        load_run(storage, "nope")


def test_generated_run_ids_are_distinct(grid, inputs):
    first = run_workflow(inputs, grid, poll_interval=50)
    second = run_workflow(inputs, grid, poll_interval=50)
    assert first.run_id != second.run_id
    assert first.job_id != second.job_id


def test_bad_sequence_file_fails_the_conversion_stage(grid, inputs):
    broken = inputs.model_copy(update={"seq_file": b">A\nACGT\n>A\nACGT\n"})
    with pytest.raises(StageFailed) as info:
        run_workflow(broken, grid, run_id="bad")
    failure = info.value
    assert failure.stage == "formatFileToNexus"
    assert isinstance(failure.error, ValueError)
    assert [stage.outcome for stage in failure.run.stage_log] == ["Succeeded", "Failed"]
    stored = load_run(grid.storage, "bad")
    assert stored.status == "Failed"
    assert stored.stage_log[1].detail.startswith("DuplicateTaxon")
    assert grid.jobs == {}


def test_unparseable_matrix_is_a_malformed_file(grid, inputs):
    broken = inputs.model_copy(update={"seq_file": b"", "seq_file_format": SeqFileFormat.PHYLIP})
    with pytest.raises(StageFailed) as info:
        run_workflow(broken, grid, run_id="empty")
    assert isinstance(info.value.error, MalformedFile)


def test_pre_stage_veto_blocks_the_run(grid, inputs):
    hooks = HooksManager()
    hooks.register("PreStage", "runMrBayes", lambda **_: HookResult(False, "grid quota exhausted"))
    with pytest.raises(StageFailed) as info:
        run_workflow(inputs, grid, hooks=hooks, run_id="vetoed")
    assert info.value.stage == "runMrBayes"
    assert isinstance(info.value.error, StageBlocked)
    assert grid.jobs == {}
    stored = load_run(grid.storage, "vetoed")
    assert [stage.outcome for stage in stored.stage_log] == ["Succeeded", "Succeeded", "Succeeded", "Blocked"]
    assert "grid quota exhausted" in stored.stage_log[-1].detail


def test_process_wide_hooks_are_used_by_default(grid, inputs):
    outcomes = []
    get_hooks_manager().register("PostStage", "*", lambda stage, outcome, **_: outcomes.append((stage, outcome)))
    run_workflow(inputs, grid, poll_interval=25)
    assert outcomes == [(stage, "Succeeded") for stage in STAGES]


def test_post_hook_sees_stored_refs(grid, inputs):
    hooks = HooksManager()
    seen = {}
    hooks.register("PostStage", "store_output", lambda payload, **_: seen.update(payload))
    run = run_workflow(inputs, grid, hooks=hooks, run_id="r9", poll_interval=25)
    assert seen["job_id"] == run.job_id
    assert seen["output_refs"] == tuple(run.output_refs)


INJECTIONS = ("none", "veto", "bad_sequence", "no_resource", "outage")


def _inject(kind, rng, storage, inputs):
    outage = ((float(rng.uniform(1.0, 99.0)), 20.0),) if kind == "outage" else ()
    resources = [Resource("a", frozenset({"mrbayes"}), failure_schedule=outage), Resource("b", frozenset({"mrbayes"}))]
    hooks = HooksManager()
    if kind == "veto":
        stage = STAGES[int(rng.integers(len(STAGES)))]
        hooks.register("PreStage", f"^{stage}$", lambda **_: HookResult(False, "injected"))
    elif kind == "bad_sequence":
        inputs = inputs.model_copy(update={"seq_file": b">A\nACGT\n>B\nAC\n"})
    elif kind == "no_resource":
        resources = [Resource("linux-only", frozenset({"linux"}))]
    return Grid(resources, storage), hooks, inputs


@pytest.mark.parametrize("seed", range(12))
def test_stage_order_holds_under_injected_failures(storage, inputs, seed):
    rng = np.random.default_rng(seed)
    kind = INJECTIONS[int(rng.integers(len(INJECTIONS)))]
    grid, hooks, run_inputs = _inject(kind, rng, storage, inputs)
    try:
        run = run_workflow(run_inputs, grid, hooks=hooks, run_id=f"inject-{seed}", poll_interval=10)
    except StageFailed as failure:
        run = failure.run
        assert failure.stage == run.stage_log[-1].name
    names = [stage.name for stage in run.stage_log]
    outcomes = [stage.outcome for stage in run.stage_log]
    assert names == list(STAGES[: len(names)])
    assert set(outcomes[:-1]) <= {"Succeeded"}
    if run.status == "Succeeded":
        assert names == list(STAGES)
    else:
        assert outcomes[-1] in ("Failed", "Blocked")
    assert load_run(storage, f"inject-{seed}").status == run.status


def test_job_without_matching_resource(storage, inputs):
    grid = Grid([Resource("linux-only", frozenset({"linux"}))], storage)
    with pytest.raises(StageFailed) as info:
        run_workflow(inputs, grid, run_id="nomatch", poll_interval=10)
    assert info.value.stage == "runMrBayes"
    assert isinstance(info.value.error, JobNotDone)
    assert "NoMatchingResource" in str(info.value.error)
    assert info.value.run.stage_log[-1].polls == 1


def test_poll_budget_is_reported(grid, inputs):
    with pytest.raises(StageFailed) as info:
        run_workflow(inputs, grid, run_id="slow", poll_interval=1, max_polls=5)
    error = info.value.error
    assert isinstance(error, JobNotDone)
    assert error.status is JobStatus.RUNNING
    assert "after 5 polls" in str(error)


def test_poll_job_on_finished_job_counts_one(grid, inputs):
    run = run_workflow(inputs, grid, poll_interval=50)
    result = poll_job(grid, run.job_id, 5.0)
    assert result.status is JobStatus.DONE
    assert result.polls == 1
    with pytest.raises(ValueError):
        poll_job(grid, run.job_id, 0.0)


def test_default_poll_interval():
    assert default_poll_interval(1_000_000) == 50_000.0
    assert default_poll_interval(0) == 1.0


def test_concurrent_runs_share_a_grid(storage, inputs):
    grid = Grid([Resource("a", frozenset({"mrbayes"})), Resource("b", frozenset({"mrbayes"}))], storage)
    runs = {}

    def submit(run_id):
        runs[run_id] = run_workflow(inputs, grid, run_id=run_id, poll_interval=10)

    threads = [threading.Thread(target=submit, args=(run_id,)) for run_id in ("left", "right")]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert {run.status for run in runs.values()} == {"Succeeded"}
    assert storage.get("runs/left/output/phylogrid.run1.t") == storage.get("runs/right/output/phylogrid.run1.t")


def test_manifest_text():
    run = WorkflowRun("x", "name", "two\nlines")
    text = render_manifest(run).decode()
    assert text.splitlines() == ["run=x", "name=name", "description=two lines", "status=Running"]
    assert parse_manifest(text).run_id == "x"
    with pytest.raises(ValueError):
        parse_manifest("name=x\n")


@pytest.mark.parametrize(
    "options",
    [
        {"seq_file_format": "msf"},
        {"job_params": {"name": "two\nlines"}},
        {"job_params": {"requirements": ("mrbayes,linux",)}},
        {"mrbayes_params": {"burnin": 1.0}},
        {"mrbayes_params": {"extra_blocks": -1}},
    ],
)
def test_input_validation(options):
    payload = {"seq_file": b">A\nAC\n", "seq_file_format": "fasta"}
    payload.update(options)
    with pytest.raises(ValidationError):
        WorkflowInputs(**payload)


def test_format_aliases_are_accepted():
    assert WorkflowInputs(seq_file=b"", seq_file_format="phy").seq_file_format.value == "Phylip"


def test_nexus_input_is_stored_unchanged(grid, inputs, nexus_bytes, small_alignment):
    nexus = inputs.model_copy(update={"seq_file": nexus_bytes, "seq_file_format": SeqFileFormat.NEXUS})
    run_workflow(nexus, grid, run_id="nx", poll_interval=50)
    stored = grid.storage.get("runs/nx/stage/formatFileToNexus")
    assert stored == nexus_bytes
    assert parse_alignment(stored, "nexus") == small_alignment

"""PhyloGrid workflow: the five-stage pipeline from a sequence file to stored results.

JobParams2jdl -> formatFileToNexus -> InputParams2runMB -> runMrBayes -> store_output

Each stage is a langgraph node; runMrBayes nests the MrBayes_poll_job graph that
advances the grid simulation until the job ends. A failing stage stops the run,
and the manifest is stored either way.
"""

from __future__ import annotations

import logging
import posixpath
import uuid
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from langgraph.graph import END, START, StateGraph
from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing_extensions import TypedDict

from consensus import ConsensusTree, asdsf, burn_in_filter, majority_rule_consensus, read_tree_trace, split_table, write_consensus
from gridsim import MCMC_EXECUTABLE, Grid, JobDescriptor, JobStatus, key_value_lines
from mbscript import McmcSettings, MbScript, ModelSpec, emit_script, parse_script
from mcmc import trace_file_names
from seqio import SeqFileFormat, convert_to_nexus, parse_alignment
from stage_hooks import HooksManager, StageBlocked, get_hooks_manager
from storage_element import KeyNotFound, StorageElement

LOG = logging.getLogger(__name__)

STAGES = ("JobParams2jdl", "formatFileToNexus", "InputParams2runMB", "runMrBayes", "store_output")
POLL_GRAPH = "MrBayes_poll_job"
OUTPUT_PREFIX = "phylogrid"
CONSENSUS_FILE = f"{OUTPUT_PREFIX}.con.tre"
SPLITS_FILE = f"{OUTPUT_PREFIX}.splits.tsv"
DEFAULT_MAX_POLLS = 10_000

SUCCEEDED = "Succeeded"
FAILED = "Failed"
BLOCKED = "Blocked"
RUNNING = "Running"


# ---- Inputs -----------------------------------------------------------------


def _single_line(value: Optional[str]) -> Optional[str]:
    if value is not None and ("\n" in value or "\r" in value):
        raise ValueError("must be a single line")
    return value


class MrBayesParams(BaseModel):
    """Model, chain settings and summary options chosen on the submission form."""

    model_config = ConfigDict(frozen=True)

    model: ModelSpec = Field(default_factory=ModelSpec)
    mcmc: McmcSettings = Field(default_factory=McmcSettings)
    extra_blocks: int = Field(0, ge=0, description="Bare 'mcmc' continuation commands after the first block.")
    burnin: float = Field(0.25, ge=0.0, lt=1.0, description="Fraction of each run's samples dropped before the consensus.")


class JobParams(BaseModel):
    """The grid job file fragment: naming, requirements and ranking."""

    model_config = ConfigDict(frozen=True)

    name: str = Field("phylogrid", min_length=1, description="Job name shown in the job file and manifest.")
    description: str = Field("", description="Free-text description of the analysis.")
    requirements: Tuple[str, ...] = Field((MCMC_EXECUTABLE,), description="Resource tags the job needs.")
    rank_hint: Optional[str] = Field(None, description="Ranking policy: 'throughput' (default) or 'speed'.")

    @field_validator("name", "description", "rank_hint")
    @classmethod
    def _no_newlines(cls, value: Optional[str]) -> Optional[str]:
        return _single_line(value)

    @field_validator("requirements")
    @classmethod
    def _plain_tags(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        tags = tuple(tag.strip() for tag in value)
        for tag in tags:
            if not tag or "," in tag or "\n" in tag:
                raise ValueError(f"bad requirement tag {tag!r}")
        return tags


class WorkflowInputs(BaseModel):
    model_config = ConfigDict(frozen=True)

    mrbayes_params: MrBayesParams = Field(default_factory=MrBayesParams)
    job_params: JobParams = Field(default_factory=JobParams)
    seq_file: bytes
    seq_file_format: SeqFileFormat

    @field_validator("seq_file_format", mode="before")
    @classmethod
    def _format_alias(cls, value: object) -> SeqFileFormat:
        return SeqFileFormat.parse(value)  # type: ignore[arg-type]


# ---- Run records ------------------------------------------------------------


class StageFailed(RuntimeError):
    """A workflow stage raised; `run` holds the partial record."""

    def __init__(self, stage: str, error: BaseException, run: Optional["WorkflowRun"] = None):
        self.stage = stage
        self.error = error
        self.run = run
        super().__init__(f"Stage {stage} failed: {type(error).__name__}: {error}")


class JobNotDone(RuntimeError):
    def __init__(self, job_id: str, status: JobStatus, reason: str = ""):
        self.job_id = job_id
        self.status = status
        detail = f" ({reason})" if reason else ""
        super().__init__(f"Job {job_id} ended {status.value}{detail}")


class UnknownRun(LookupError):
    def __init__(self, run_id: str):
        self.run_id = run_id
        super().__init__(f"Unknown run '{run_id}'.")


@dataclass
class StageRecord:
    name: str
    start: float
    end: Optional[float] = None
    outcome: str = RUNNING
    detail: str = ""
    polls: Optional[int] = None


@dataclass
class WorkflowRun:
    run_id: str
    name: str = ""
    description: str = ""
    stage_log: List[StageRecord] = field(default_factory=list)
    output_refs: List[str] = field(default_factory=list)
    digests: Dict[str, str] = field(default_factory=dict)
    job_id: Optional[str] = None
    asdsf: Optional[float] = None
    consensus: Optional[ConsensusTree] = None
    failure: Optional[StageFailed] = None

    @property
    def manifest_key(self) -> str:
        return manifest_key(self.run_id)

    @property
    def status(self) -> str:
        if any(stage.outcome in (FAILED, BLOCKED) for stage in self.stage_log):
            return FAILED
        if len(self.stage_log) == len(STAGES) and all(stage.outcome == SUCCEEDED for stage in self.stage_log):
            return SUCCEEDED
        return RUNNING

    @property
    def failed_stage(self) -> Optional[str]:
        for stage in self.stage_log:
            if stage.outcome in (FAILED, BLOCKED):
                return stage.name
        return None


def manifest_key(run_id: str) -> str:
    return f"runs/{run_id}/manifest"


def _flat(text: str) -> str:
    return " ".join(text.split())


def render_manifest(run: WorkflowRun) -> bytes:
    lines = [f"run={run.run_id}", f"name={_flat(run.name)}", f"description={_flat(run.description)}"]
    if run.job_id:
        lines.append(f"job={run.job_id}")
    lines.append(f"status={run.status}")
    for stage in run.stage_log:
        end = stage.end if stage.end is not None else stage.start
        line = f"stage={stage.name} status={stage.outcome} start={stage.start:.6f} end={end:.6f}"
        if stage.polls is not None:
            line += f" polls={stage.polls}"
        if stage.detail:
            line += f" error={_flat(stage.detail)}"
        lines.append(line)
    if run.asdsf is not None:
        lines.append(f"asdsf={run.asdsf:.6f}")
    for key in run.output_refs:
        lines.append(f"output={key} sha256={run.digests[key]}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_manifest(data: bytes | str) -> WorkflowRun:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    run: Optional[WorkflowRun] = None
    for lineno, key, value in key_value_lines(text, ValueError):
        if key == "run":
            run = WorkflowRun(value)
            continue
        if run is None:
            raise ValueError(f"Manifest line {lineno} precedes run=")
        if key == "name":
            run.name = value
        elif key == "description":
            run.description = value
        elif key == "job":
            run.job_id = value
        elif key == "asdsf":
            run.asdsf = float(value)
        elif key == "output":
            ref, _, digest = value.partition(" sha256=")
            run.output_refs.append(ref)
            run.digests[ref] = digest.strip()
        elif key == "stage":
            body, _, error = value.partition(" error=")
            name, *pairs = body.split()
            fields = dict(pair.split("=", 1) for pair in pairs)
            run.stage_log.append(
                StageRecord(
                    name,
                    float(fields["start"]),
                    float(fields["end"]),
                    fields["status"],
                    error,
                    int(fields["polls"]) if "polls" in fields else None,
                )
            )
    if run is None:
        raise ValueError("Manifest has no run= line")
    return run


def load_run(storage: StorageElement, run_id: str) -> WorkflowRun:
    try:
        return parse_manifest(storage.get(manifest_key(run_id)))
    except KeyNotFound as exc:
        raise UnknownRun(run_id) from exc


# ---- Polling ----------------------------------------------------------------


@dataclass(frozen=True)
class PollResult:
    status: JobStatus
    polls: int


class PollState(TypedDict, total=False):
    grid: Grid
    job_id: str
    interval: float
    max_polls: int
    waits: int
    status: JobStatus


def _check_status(state: PollState) -> PollState:
    return {"status": state["grid"].status(state["job_id"])}


def _wait(state: PollState) -> PollState:
    state["grid"].advance_by(state["interval"])
    return {"waits": state.get("waits", 0) + 1}


def _after_check(state: PollState) -> str:
    if state["status"].terminal or state.get("waits", 0) >= state["max_polls"]:
        return END
    return "wait"


poll_workflow = StateGraph(PollState)
poll_workflow.add_node("check_status", _check_status)
poll_workflow.add_node("wait", _wait)
poll_workflow.add_edge(START, "check_status")
poll_workflow.add_conditional_edges("check_status", _after_check, {"wait": "wait", END: END})
poll_workflow.add_edge("wait", "check_status")
poll_graph = poll_workflow.compile()


def poll_job(grid: Grid, job_id: str, interval: float, *, max_polls: int = DEFAULT_MAX_POLLS) -> PollResult:
    """Advance the grid by `interval` until the job is Done or Failed.

    The poll count is the number of waits, and 1 when the job had already ended.
    A job still active after `max_polls` waits is returned with its current status.
    """
    if not interval > 0:
        raise ValueError(f"Poll interval must be positive, got {interval}")
    grid.job(job_id)
    result = poll_graph.invoke(
        {"grid": grid, "job_id": job_id, "interval": float(interval), "max_polls": max_polls, "waits": 0},
        {"recursion_limit": 2 * max_polls + 5},
    )
    return PollResult(result["status"], max(result.get("waits", 0), 1))


def default_poll_interval(total_work: int) -> float:
    return max(total_work / 20.0, 1.0)


# ---- Stages -----------------------------------------------------------------


@dataclass
class _RunContext:
    inputs: WorkflowInputs
    grid: Grid
    hooks: HooksManager
    run: WorkflowRun
    poll_interval: Optional[float]
    max_polls: int

    @property
    def storage(self) -> StorageElement:
        return self.grid.storage

    @property
    def root(self) -> str:
        return f"runs/{self.run.run_id}"

    def stage_key(self, stage: str) -> str:
        return f"{self.root}/stage/{stage}"

    def output_key(self, name: str) -> str:
        return f"{self.root}/output/{name}"

    def store(self, key: str, data: bytes) -> str:
        digest = self.storage.put(key, data)
        self.run.output_refs.append(key)
        self.run.digests[key] = digest
        return digest


class WorkflowState(TypedDict, total=False):
    context: _RunContext
    descriptor: JobDescriptor
    jdl_key: str
    nexus_key: str
    script_key: str
    script: MbScript
    job_id: str
    failed: bool


def _job_params_to_jdl(ctx: _RunContext, state: WorkflowState) -> WorkflowState:
    params = ctx.inputs.job_params
    nruns = ctx.inputs.mrbayes_params.mcmc.nruns
    # refs in the job file are relative to the run root; the grid gets them rooted
    script_ref, nexus_ref = "stage/InputParams2runMB", "stage/formatFileToNexus"
    descriptor = JobDescriptor(
        executable=MCMC_EXECUTABLE,
        arguments=script_ref,
        input_refs=(script_ref, nexus_ref),
        output_refs=tuple(f"output/{name}" for name in trace_file_names(OUTPUT_PREFIX, nruns)),
        requirements=frozenset(params.requirements),
        rank_hint=params.rank_hint,
        name=params.name,
        description=params.description,
    )
    jdl_key = ctx.stage_key("JobParams2jdl")
    ctx.store(jdl_key, descriptor.to_jdl().encode("utf-8"))
    rooted = descriptor.rooted_at(ctx.root)
    return {
        "descriptor": rooted,
        "jdl_key": jdl_key,
        "nexus_key": posixpath.join(ctx.root, nexus_ref),
        "script_key": rooted.arguments,
    }


def _format_file_to_nexus(ctx: _RunContext, state: WorkflowState) -> WorkflowState:
    nexus = convert_to_nexus(ctx.inputs.seq_file, ctx.inputs.seq_file_format)
    ctx.store(state["nexus_key"], nexus)
    return {}


def _input_params_to_run_mb(ctx: _RunContext, state: WorkflowState) -> WorkflowState:
    params = ctx.inputs.mrbayes_params
    # relative to the script, so the block is identical across runs
    data_path = posixpath.relpath(state["nexus_key"], posixpath.dirname(state["script_key"]))
    block = emit_script(params.model, params.mcmc, data_path, params.extra_blocks)
    ctx.store(state["script_key"], block)
    return {"script": parse_script(block)}


def _run_mrbayes(ctx: _RunContext, state: WorkflowState) -> WorkflowState:
    parse_alignment(ctx.storage.get(state["nexus_key"]), SeqFileFormat.NEXUS)
    job_id = ctx.grid.submit(state["descriptor"])
    ctx.run.job_id = job_id
    interval = ctx.poll_interval or default_poll_interval(state["script"].total_generations)
    result = poll_job(ctx.grid, job_id, interval, max_polls=ctx.max_polls)
    ctx.run.stage_log[-1].polls = result.polls
    if result.status is not JobStatus.DONE:
        record = ctx.grid.job(job_id)
        reason = record.failure_reason.value if record.failure_reason else f"still {result.status.value} after {result.polls} polls"
        raise JobNotDone(job_id, result.status, reason)
    return {"job_id": job_id}


def _store_output(ctx: _RunContext, state: WorkflowState) -> WorkflowState:
    stored = ctx.grid.stage_out(state["job_id"])
    for key, digest in stored.items():
        ctx.run.output_refs.append(key)
        ctx.run.digests[key] = digest
    burnin = ctx.inputs.mrbayes_params.burnin
    runs = [burn_in_filter(read_tree_trace(ctx.storage.get(key)), burnin) for key in stored if key.endswith(".t")]
    pooled = [sample for run in runs for sample in run]
    tree = majority_rule_consensus(pooled)
    comments = [f"samples={len(pooled)} burnin={burnin:g}"]
    if len(runs) >= 2:
        ctx.run.asdsf = asdsf(*runs)
        comments.append(f"asdsf={ctx.run.asdsf:.6f}")
    ctx.store(ctx.output_key(CONSENSUS_FILE), write_consensus(tree))
    ctx.store(ctx.output_key(SPLITS_FILE), split_table(tree.splits, comments))
    ctx.run.consensus = tree
    return {}


def _stage_payload(ctx: _RunContext) -> Dict[str, object]:
    return {"run_id": ctx.run.run_id, "job_id": ctx.run.job_id, "output_refs": tuple(ctx.run.output_refs)}


def _stage(name: str, body: Callable[[_RunContext, WorkflowState], WorkflowState]) -> Callable[[WorkflowState], WorkflowState]:
    def node(state: WorkflowState) -> WorkflowState:
        ctx = state["context"]
        record = StageRecord(name, ctx.grid.now)
        ctx.run.stage_log.append(record)
        allowed, messages = ctx.hooks.run_pre_stage_hooks(ctx.run.run_id, name, _stage_payload(ctx))
        error: Optional[BaseException] = None
        update: WorkflowState = {}
        if not allowed:
            error = StageBlocked(name, messages)
            record.outcome = BLOCKED
        else:
            LOG.info("Run %s: stage %s started", ctx.run.run_id, name)
            try:
                update = body(ctx, state)
                record.outcome = SUCCEEDED
            except Exception as exc:
                error = exc
                record.outcome = FAILED
        record.end = ctx.grid.now
        if error is not None:
            record.detail = f"{type(error).__name__}: {error}"
            ctx.run.failure = StageFailed(name, error, ctx.run)
            LOG.warning("Run %s: stage %s %s: %s", ctx.run.run_id, name, record.outcome.lower(), error)
            update = {"failed": True}
        ctx.hooks.run_post_stage_hooks(ctx.run.run_id, name, _stage_payload(ctx), record.outcome)
        return update

    node.__name__ = name
    return node


def _route(state: WorkflowState) -> str:
    return END if state.get("failed") else "next"


_BODIES = {
    "JobParams2jdl": _job_params_to_jdl,
    "formatFileToNexus": _format_file_to_nexus,
    "InputParams2runMB": _input_params_to_run_mb,
    "runMrBayes": _run_mrbayes,
    "store_output": _store_output,
}

pipeline = StateGraph(WorkflowState)
for _name in STAGES:
    pipeline.add_node(_name, _stage(_name, _BODIES[_name]))
pipeline.add_edge(START, STAGES[0])
for _name, _next in zip(STAGES, STAGES[1:]):
    pipeline.add_conditional_edges(_name, _route, {"next": _next, END: END})
pipeline.add_edge(STAGES[-1], END)
pipeline_graph = pipeline.compile()


def run_workflow(
    inputs: WorkflowInputs,
    grid: Grid,
    *,
    hooks: Optional[HooksManager] = None,
    run_id: Optional[str] = None,
    poll_interval: Optional[float] = None,
    max_polls: int = DEFAULT_MAX_POLLS,
) -> WorkflowRun:
    """Run the five stages against `grid` and store the manifest.

    Raises StageFailed (carrying the partial run) when a stage fails; the
    manifest is stored before the error propagates.
    """
    run = WorkflowRun(run_id or uuid.uuid4().hex, inputs.job_params.name, inputs.job_params.description)
    ctx = _RunContext(inputs, grid, hooks or get_hooks_manager(), run, poll_interval, max_polls)
    LOG.info("Workflow run %s started (%s)", run.run_id, run.name)
    pipeline_graph.invoke({"context": ctx})
    try:
        grid.storage.put(run.manifest_key, render_manifest(run))
    except Exception as exc:
        LOG.error("Could not store manifest for run %s: %s", run.run_id, exc)
        if run.failure is None:
            raise StageFailed(STAGES[-1], exc, run) from exc
    if run.failure is not None:
        raise run.failure
    LOG.info("Workflow run %s succeeded with %d outputs", run.run_id, len(run.output_refs))
    return run


__all__ = [
    "JobNotDone",
    "JobParams",
    "MrBayesParams",
    "PollResult",
    "STAGES",
    "StageFailed",
    "StageRecord",
    "UnknownRun",
    "WorkflowInputs",
    "WorkflowRun",
    "default_poll_interval",
    "load_run",
    "parse_manifest",
    "poll_job",
    "render_manifest",
    "run_workflow",
]

"""Deterministic discrete-event simulation of a small computational grid.

Resources carry capability tags, a relative speed and an outage schedule. Jobs
are described by a JDL-like descriptor, matched and ranked GridWay-style,
checkpointed into the storage element while they run, and migrated to another
resource when theirs goes down. Time is measured in abstract work units: a
resource of speed s completes s units of work per unit of time, and an MCMC job
carries one unit per generation.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import logging
import math
import posixpath
import threading
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Deque, Dict, FrozenSet, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from mbscript import MbScript, parse_script
from mcmc import McmcRun, MemorySink
from seqio import Alignment, SeqFileFormat, parse_alignment
from storage_element import StorageElement

LOG = logging.getLogger(__name__)

DEFAULT_MAX_RETRIES = 3
HISTORY_SIZE = 32
MIN_HISTORY = 3
MCMC_EXECUTABLE = "mrbayes"


# ---- Errors -----------------------------------------------------------------


class GridError(RuntimeError):
    """Base class for grid simulation failures."""


class UnknownInputRef(GridError):
    def __init__(self, ref: str):
        self.ref = ref
        super().__init__(f"Input '{ref}' is not in the storage element.")


class UnknownJob(GridError):
    def __init__(self, job_id: str):
        self.job_id = job_id
        super().__init__(f"Unknown job '{job_id}'.")


class UnknownExecutable(GridError):
    def __init__(self, executable: str):
        self.executable = executable
        super().__init__(f"No workload is registered for executable '{executable}'.")


class MalformedJdl(GridError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class GridConfigError(GridError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class IllegalTransition(GridError):
    """A job status change outside the lifecycle graph; indicates an engine bug."""

    def __init__(self, job_id: str, current: "JobStatus", target: "JobStatus"):
        self.job_id = job_id
        super().__init__(f"Job {job_id}: {current.value} -> {target.value} is not allowed.")


# ---- Lifecycle --------------------------------------------------------------


class JobStatus(str, Enum):
    SUBMITTED = "Submitted"
    SCHEDULED = "Scheduled"
    RUNNING = "Running"
    DONE = "Done"
    FAILED = "Failed"
    MIGRATING = "Migrating"

    @property
    def terminal(self) -> bool:
        return self in (JobStatus.DONE, JobStatus.FAILED)


class FailureReason(str, Enum):
    NO_MATCHING_RESOURCE = "NoMatchingResource"
    RETRIES_EXHAUSTED = "RetriesExhausted"
    CANCELLED = "Cancelled"
    WORKLOAD_ERROR = "WorkloadError"


STATUS_GRAPH: Dict[JobStatus, FrozenSet[JobStatus]] = {
    JobStatus.SUBMITTED: frozenset({JobStatus.SCHEDULED, JobStatus.FAILED}),
    JobStatus.SCHEDULED: frozenset({JobStatus.RUNNING, JobStatus.FAILED}),
    JobStatus.RUNNING: frozenset({JobStatus.DONE, JobStatus.MIGRATING, JobStatus.FAILED}),
    JobStatus.MIGRATING: frozenset({JobStatus.SCHEDULED, JobStatus.FAILED}),
    JobStatus.DONE: frozenset(),
    JobStatus.FAILED: frozenset(),
}


# ---- Resources and descriptors ----------------------------------------------


@dataclass(frozen=True)
class Resource:
    id: str
    tags: FrozenSet[str] = frozenset()
    speed: float = 1.0
    failure_schedule: Tuple[Tuple[float, float], ...] = ()
    slots: int = 1

    def __post_init__(self) -> None:
        if not self.id:
            raise GridConfigError("Resource id must be non-empty")
        if not (self.speed > 0 and math.isfinite(self.speed)):
            raise GridConfigError(f"Resource {self.id}: speed must be positive, got {self.speed}")
        if self.slots < 1:
            raise GridConfigError(f"Resource {self.id}: slots must be at least 1")
        schedule = tuple(sorted((float(start), float(duration)) for start, duration in self.failure_schedule))
        for start, duration in schedule:
            if start < 0 or duration < 0 or not math.isfinite(start + duration):
                raise GridConfigError(f"Resource {self.id}: bad outage ({start}, {duration})")
        object.__setattr__(self, "tags", frozenset(self.tags))
        object.__setattr__(self, "failure_schedule", schedule)

    def in_outage(self, time: float) -> bool:
        return any(start <= time < start + duration for start, duration in self.failure_schedule)


_JDL_KEYS = {
    "jobname": "JobName",
    "description": "Description",
    "executable": "Executable",
    "arguments": "Arguments",
    "inputref": "InputRef",
    "outputref": "OutputRef",
    "requirements": "Requirements",
    "rank": "Rank",
}
_JDL_REPEATABLE = {"InputRef", "OutputRef"}


def _tag_set(value: str) -> FrozenSet[str]:
    return frozenset(tag.strip() for tag in value.split(",") if tag.strip())


@dataclass(frozen=True)
class JobDescriptor:
    """Grid job file: what to run, what it reads and writes, where it may run."""

    executable: str
    arguments: str = ""
    input_refs: Tuple[str, ...] = ()
    output_refs: Tuple[str, ...] = ()
    requirements: FrozenSet[str] = frozenset()
    rank_hint: Optional[str] = None
    name: str = ""
    description: str = ""

    def __post_init__(self) -> None:
        if not self.executable:
            raise MalformedJdl("Executable must be non-empty")
        object.__setattr__(self, "input_refs", tuple(self.input_refs))
        object.__setattr__(self, "output_refs", tuple(self.output_refs))
        object.__setattr__(self, "requirements", frozenset(self.requirements))

    def rooted_at(self, root: str) -> "JobDescriptor":
        """Descriptor with Arguments and every ref taken relative to `root`."""

        def under(path: str) -> str:
            return posixpath.join(root, path) if path else path

        return replace(
            self,
            arguments=under(self.arguments),
            input_refs=tuple(under(ref) for ref in self.input_refs),
            output_refs=tuple(under(ref) for ref in self.output_refs),
        )

    def to_jdl(self) -> str:
        pairs: List[Tuple[str, str]] = []
        if self.name:
            pairs.append(("JobName", self.name))
        if self.description:
            pairs.append(("Description", self.description))
        pairs.append(("Executable", self.executable))
        pairs.append(("Arguments", self.arguments))
        pairs.extend(("InputRef", ref) for ref in self.input_refs)
        pairs.extend(("OutputRef", ref) for ref in self.output_refs)
        if self.requirements:
            pairs.append(("Requirements", ",".join(sorted(self.requirements))))
        if self.rank_hint:
            pairs.append(("Rank", self.rank_hint))
        for key, value in pairs:
            if "\n" in value or "\r" in value:
                raise MalformedJdl(f"{key} may not span lines")
        return "".join(f"{key}={value}\n" for key, value in pairs)

    @classmethod
    def from_jdl(cls, text: str) -> "JobDescriptor":
        single: Dict[str, str] = {}
        repeated: Dict[str, List[str]] = {"InputRef": [], "OutputRef": []}
        for lineno, key, value in key_value_lines(text, MalformedJdl):
            canonical = _JDL_KEYS.get(key.lower())
            if canonical is None:
                raise MalformedJdl(f"Unknown JDL attribute '{key}'", lineno)
            if canonical in _JDL_REPEATABLE:
                repeated[canonical].append(value)
            elif canonical in single:
                raise MalformedJdl(f"Duplicate JDL attribute '{canonical}'", lineno)
            else:
                single[canonical] = value
        if "Executable" not in single:
            raise MalformedJdl("JDL has no Executable")
        return cls(
            executable=single["Executable"],
            arguments=single.get("Arguments", ""),
            input_refs=tuple(repeated["InputRef"]),
            output_refs=tuple(repeated["OutputRef"]),
            requirements=_tag_set(single.get("Requirements", "")),
            rank_hint=single.get("Rank") or None,
            name=single.get("JobName", ""),
            description=single.get("Description", ""),
        )


def key_value_lines(text: str, error: Callable[..., Exception] = GridConfigError) -> List[Tuple[int, str, str]]:
    """(line number, key, value) for every non-blank line; `#` starts a comment."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise error(f"Expected key=value, got '{line}'", lineno)
        entries.append((lineno, key.strip(), value.strip()))
    return entries


# ---- Accounting and ranking -------------------------------------------------


class AccountingHistory:
    """Throughput observations (work / wall time) for the last executions per resource."""

    def __init__(self, size: int = HISTORY_SIZE):
        self.size = size
        self._observations: Dict[str, Deque[float]] = {}

    @classmethod
    def from_observations(cls, observations: Mapping[str, Iterable[float]]) -> "AccountingHistory":
        history = cls()
        for resource_id, values in observations.items():
            for value in values:
                history.observe(resource_id, value)
        return history

    def observe(self, resource_id: str, throughput: float) -> None:
        if not (throughput >= 0 and math.isfinite(throughput)):
            raise GridError(f"Throughput observations must be finite and non-negative, got {throughput}")
        self._observations.setdefault(resource_id, deque(maxlen=self.size)).append(float(throughput))

    def record(self, resource_id: str, work: float, wall_time: float) -> Optional[float]:
        if wall_time <= 0:
            return None
        throughput = max(work, 0.0) / wall_time
        self.observe(resource_id, throughput)
        return throughput

    def observations(self, resource_id: str) -> Tuple[float, ...]:
        return tuple(self._observations.get(resource_id, ()))

    def mean(self, resource_id: str) -> Optional[float]:
        values = self._observations.get(resource_id)
        if not values or len(values) < MIN_HISTORY:
            return None
        return float(np.mean(values))


Ranker = Callable[[Resource, AccountingHistory], float]


def mean_throughput(resource: Resource, history: AccountingHistory) -> float:
    mean = history.mean(resource.id)
    return resource.speed if mean is None else mean


def declared_speed(resource: Resource, history: AccountingHistory) -> float:
    return resource.speed


RANKERS: Dict[str, Ranker] = {"throughput": mean_throughput, "speed": declared_speed}


def ranker_for(hint: Optional[str]) -> Ranker:
    if not hint:
        return mean_throughput
    ranker = RANKERS.get(hint.lower())
    if ranker is None:
        LOG.warning("Unknown rank hint '%s'; ranking by accounted throughput", hint)
        return mean_throughput
    return ranker


def match_and_rank(
    jd: JobDescriptor,
    resources: Iterable[Resource],
    history: AccountingHistory,
    now: float = 0.0,
    ranker: Optional[Ranker] = None,
) -> List[Resource]:
    """Resources that satisfy the requirements and are up at `now`, best first."""
    rank = ranker or ranker_for(jd.rank_hint)
    candidates = [r for r in resources if jd.requirements <= r.tags and not r.in_outage(now)]
    return sorted(candidates, key=lambda r: (-rank(r, history), r.id))


# ---- Workloads --------------------------------------------------------------


@dataclass(frozen=True)
class WorkloadSnapshot:
    work: int
    state: bytes
    files: Mapping[str, bytes] = field(default_factory=dict)


class Workload(Protocol):
    @property
    def total_work(self) -> int: ...

    @property
    def checkpoint_every(self) -> int: ...

    def start(self, snapshot: Optional[WorkloadSnapshot]) -> int: ...

    def run_to(self, work: int) -> None: ...

    def snapshot(self) -> WorkloadSnapshot: ...

    def finish(self) -> Dict[str, bytes]: ...


WorkloadFactory = Callable[["JobDescriptor", StorageElement], Workload]


def resolve_ref(base_key: str, path: str) -> str:
    """Storage key for `path` taken relative to the directory of `base_key`."""
    resolved = posixpath.normpath(posixpath.join(posixpath.dirname(base_key), path))
    if resolved.startswith("../") or resolved in ("..", "."):
        raise GridError(f"Path '{path}' escapes the storage namespace of '{base_key}'")
    return resolved


class McmcWorkload:
    """MrBayes-style analysis hosted on a grid resource.

    Arguments holds the storage key of the MrBayes block. The block's
    `execute` path names the NEXUS data relative to the script's own key, the
    way MrBayes resolves it against its working directory.
    """

    def __init__(self, script: MbScript, alignment: Alignment, prefix: str = "phylogrid"):
        self.script = script
        self.alignment = alignment
        self.prefix = prefix
        self._run: Optional[McmcRun] = None
        self._sink: Optional[MemorySink] = None

    @classmethod
    def from_descriptor(cls, jd: JobDescriptor, storage: StorageElement) -> "McmcWorkload":
        script = parse_script(storage.get(jd.arguments))
        data_key = resolve_ref(jd.arguments, script.execute_path)
        alignment = parse_alignment(storage.get(data_key), SeqFileFormat.NEXUS)
        return cls(script, alignment)

    @property
    def total_work(self) -> int:
        return self.script.total_generations

    @property
    def checkpoint_every(self) -> int:
        if self.total_work == 0:
            return 0
        return max(self.script.mcmc.samplefreq, self.script.mcmc.ngen // 100)

    def _active(self) -> McmcRun:
        if self._run is None:
            raise GridError("Workload was not started")
        return self._run

    def start(self, snapshot: Optional[WorkloadSnapshot]) -> int:
        options = {"prefix": self.prefix, "blocks": self.script.blocks}
        model, settings = self.script.model, self.script.mcmc
        if snapshot is None:
            self._sink = MemorySink()
            self._run = McmcRun.start(self.alignment, model, settings, self._sink, **options)
        else:
            self._sink = MemorySink(snapshot.files)
            self._run = McmcRun.resume(snapshot.state, self.alignment, model, settings, self._sink, **options)
        return self._run.generation

    def run_to(self, work: int) -> None:
        self._active().advance(work)

    def snapshot(self) -> WorkloadSnapshot:
        run = self._active()
        assert self._sink is not None
        return WorkloadSnapshot(run.generation, run.checkpoint(), self._sink.snapshot())

    def finish(self) -> Dict[str, bytes]:
        run = self._active()
        run.finish()
        assert self._sink is not None
        return {name: self._sink.read(name) for name in run.trace_files}


WORKLOADS: Dict[str, WorkloadFactory] = {MCMC_EXECUTABLE: McmcWorkload.from_descriptor}


# ---- Records ----------------------------------------------------------------


@dataclass
class Attempt:
    resource_id: str
    start: float
    end: Optional[float] = None
    reason: Optional[str] = None


@dataclass
class JobRecord:
    job_id: str
    descriptor: JobDescriptor
    status: JobStatus = JobStatus.SUBMITTED
    resource_history: List[Attempt] = field(default_factory=list)
    checkpoint_ref: Optional[str] = None
    checkpoint_work: int = 0
    failures: int = 0
    failure_reason: Optional[FailureReason] = None
    failure_detail: str = ""
    submitted_at: float = 0.0
    finished_at: Optional[float] = None
    total_work: Optional[int] = None
    excluded: Optional[str] = None
    attempt: int = 0
    status_log: List[Tuple[float, JobStatus]] = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return self.status.terminal

    @property
    def current_resource(self) -> Optional[str]:
        if self.resource_history and self.resource_history[-1].end is None:
            return self.resource_history[-1].resource_id
        return None


@dataclass(frozen=True)
class MigrationDecision:
    job_id: str
    failed_resource: str
    status: JobStatus
    target: Optional[str]
    checkpoint_ref: Optional[str]
    resume_work: int
    reason: Optional[FailureReason] = None


@dataclass(frozen=True)
class GridEvent:
    time: float
    kind: str
    job_id: str = "-"
    resource_id: str = "-"
    detail: str = ""

    def line(self) -> str:
        text = f"{self.time:.6f} {self.kind} job={self.job_id} resource={self.resource_id}"
        return f"{text} {self.detail}" if self.detail else text


def event_log_text(events: Iterable[GridEvent]) -> str:
    return "".join(event.line() + "\n" for event in events)


@dataclass(order=True)
class _Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    target: str = field(compare=False)
    attempt: int = field(compare=False, default=0)
    value: float = field(compare=False, default=0.0)


@dataclass
class _Active:
    workload: Workload
    resource: Resource
    attempt: int
    started: float
    start_work: int
    saved_work: int


# ---- Configuration ----------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    resources: Tuple[Resource, ...] = ()
    max_retries: int = DEFAULT_MAX_RETRIES
    seed: int = 0
    failure_rate: float = 0.0
    failure_duration: float = 10.0
    failure_horizon: float = 0.0

    def __post_init__(self) -> None:
        ids = [resource.id for resource in self.resources]
        duplicates = sorted(name for name, count in Counter(ids).items() if count > 1)
        if duplicates:
            raise GridConfigError(f"Duplicate resource id(s): {', '.join(duplicates)}")
        if self.max_retries < 0:
            raise GridConfigError("max_retries must be non-negative")
        if self.failure_rate < 0 or self.failure_duration < 0 or self.failure_horizon < 0:
            raise GridConfigError("failure_rate, failure_duration and failure_horizon must be non-negative")

    def expanded_resources(self) -> Tuple[Resource, ...]:
        """Resources with seeded random outages (if configured) merged into their schedules."""
        if self.failure_rate <= 0 or self.failure_horizon <= 0:
            return self.resources
        rng = np.random.default_rng(self.seed)
        expanded = []
        for resource in self.resources:
            extra = []
            time = float(rng.exponential(1.0 / self.failure_rate))
            while time < self.failure_horizon:
                extra.append((time, self.failure_duration))
                time += self.failure_duration + float(rng.exponential(1.0 / self.failure_rate))
            expanded.append(replace(resource, failure_schedule=resource.failure_schedule + tuple(extra)))
        return tuple(expanded)


def _number(kind: Callable[[str], float], key: str, value: str, lineno: int) -> float:
    try:
        return kind(value)
    except ValueError as exc:
        raise GridConfigError(f"Bad value '{value}' for {key}", lineno) from exc


def load_grid_config(text: str) -> GridConfig:
    """Parse the line-oriented grid file; each `resource.id=` opens a new resource section."""
    resources: List[Resource] = []
    current: Optional[Dict[str, object]] = None
    options: Dict[str, object] = {}

    def close_section() -> None:
        if current is None:
            return
        line = current.pop("line")
        try:
            resources.append(Resource(**current))  # type: ignore[arg-type]
        except GridConfigError as exc:
            raise GridConfigError(str(exc), line) from exc  # type: ignore[arg-type]

    for lineno, key, value in key_value_lines(text):
        key = key.lower()
        if key.startswith("resource."):
            attribute = key[len("resource.") :]
            if attribute == "id":
                close_section()
                current = {"id": value, "line": lineno, "failure_schedule": []}
                continue
            if current is None:
                raise GridConfigError(f"'{key}' appears before any resource.id", lineno)
            if attribute == "tags":
                current["tags"] = _tag_set(value)
            elif attribute == "speed":
                current["speed"] = _number(float, key, value, lineno)
            elif attribute == "slots":
                current["slots"] = int(_number(int, key, value, lineno))
            elif attribute == "outage":
                parts = [part.strip() for part in value.split(",")]
                if len(parts) != 2:
                    raise GridConfigError("resource.outage expects 'time,duration'", lineno)
                schedule = current["failure_schedule"]
                assert isinstance(schedule, list)
                schedule.append((_number(float, key, parts[0], lineno), _number(float, key, parts[1], lineno)))
            else:
                raise GridConfigError(f"Unknown resource attribute '{attribute}'", lineno)
        elif key in ("max_retries", "seed"):
            options[key] = int(_number(int, key, value, lineno))
        elif key in ("failure_rate", "failure_duration", "failure_horizon"):
            options[key] = _number(float, key, value, lineno)
        else:
            raise GridConfigError(f"Unknown grid option '{key}'", lineno)
    close_section()
    return GridConfig(resources=tuple(resources), **options)  # type: ignore[arg-type]


# ---- Engine -----------------------------------------------------------------


class Grid:
    """Single-threaded event engine; every public method holds the grid lock."""

    def __init__(
        self,
        resources: Sequence[Resource] = (),
        storage: Optional[StorageElement] = None,
        *,
        max_retries: int = DEFAULT_MAX_RETRIES,
        workloads: Optional[Mapping[str, WorkloadFactory]] = None,
    ):
        self.resources: Dict[str, Resource] = {}
        for resource in resources:
            if resource.id in self.resources:
                raise GridConfigError(f"Duplicate resource id: {resource.id}")
            self.resources[resource.id] = resource
        self.storage = storage if storage is not None else StorageElement(":memory:")
        self.max_retries = max_retries
        self.workloads: Dict[str, WorkloadFactory] = dict(WORKLOADS)
        self.workloads.update(workloads or {})
        self.history = AccountingHistory()
        self.now = 0.0
        self.jobs: Dict[str, JobRecord] = {}
        self.events: List[GridEvent] = []
        self._queue: List[_Event] = []
        self._seq = itertools.count()
        self._lock = threading.RLock()
        self._active: Dict[str, _Active] = {}
        self._busy: Counter = Counter()
        self._waiting: List[str] = []
        self._outputs: Dict[str, Dict[str, bytes]] = {}
        for resource in self.resources.values():
            for start, duration in resource.failure_schedule:
                self._push(start, "outage", resource.id, value=duration)

    @classmethod
    def from_config(cls, config: GridConfig, storage: Optional[StorageElement] = None, **options) -> "Grid":
        return cls(config.expanded_resources(), storage, max_retries=config.max_retries, **options)

    # -- public surface --

    def submit(self, jd: JobDescriptor) -> str:
        with self._lock:
            if jd.executable not in self.workloads:
                raise UnknownExecutable(jd.executable)
            for ref in jd.input_refs:
                if not self.storage.exists(ref):
                    raise UnknownInputRef(ref)
            number = len(self.jobs) + 1
            token = hashlib.sha256(f"{number}\n{jd.to_jdl()}".encode("utf-8")).hexdigest()[:10]
            job_id = f"job-{number:04d}-{token}"
            record = JobRecord(job_id, jd, submitted_at=self.now)
            record.status_log.append((self.now, JobStatus.SUBMITTED))
            self.jobs[job_id] = record
            self._log("submitted", job_id, detail=f"executable={jd.executable}")
            self._push(self.now, "schedule", job_id)
            LOG.info("Submitted %s (%s)", job_id, jd.name or jd.executable)
            return job_id

    def job(self, job_id: str) -> JobRecord:
        with self._lock:
            record = self.jobs.get(job_id)
            if record is None:
                raise UnknownJob(job_id)
            return record

    def status(self, job_id: str) -> JobStatus:
        return self.job(job_id).status

    def advance(self, until: float) -> List[GridEvent]:
        """Process every event at or before `until` and move the clock there."""
        with self._lock:
            if until < self.now:
                raise GridError(f"Cannot move the clock back from {self.now} to {until}")
            first = len(self.events)
            while self._queue and self._queue[0].time <= until:
                self._dispatch(heapq.heappop(self._queue))
            self.now = until
            return self.events[first:]

    def advance_by(self, interval: float) -> List[GridEvent]:
        with self._lock:
            return self.advance(self.now + interval)

    def settle(self) -> List[GridEvent]:
        """Process events until every job is terminal or nothing is left to happen."""
        with self._lock:
            first = len(self.events)
            while self._queue and any(not record.terminal for record in self.jobs.values()):
                self._dispatch(heapq.heappop(self._queue))
            return self.events[first:]

    def cancel(self, job_id: str) -> JobStatus:
        with self._lock:
            record = self.job(job_id)
            if record.terminal:
                return record.status
            active = self._active.pop(job_id, None)
            if active is not None:
                self._close_attempt(record, active, "cancelled")
            self._fail(record, FailureReason.CANCELLED, "cancelled by user")
            self._drain_waiting()
            return record.status

    def on_failure(self, job_id: str) -> MigrationDecision:
        """The resource running `job_id` went down: migrate from the last checkpoint or give up."""
        with self._lock:
            record = self.job(job_id)
            active = self._active.pop(job_id, None)
            if active is None or record.status is not JobStatus.RUNNING:
                raise GridError(f"Job {job_id} is not running")
            failed = active.resource.id
            self._close_attempt(record, active, "outage")
            record.failures += 1
            record.excluded = failed
            self._log(
                "interrupted", job_id, failed,
                f"failures={record.failures} checkpoint={record.checkpoint_ref or 'none'}",
            )
            if record.failures > self.max_retries:
                self._fail(record, FailureReason.RETRIES_EXHAUSTED, f"{record.failures} failures")
                target = None
            else:
                self._transition(record, JobStatus.MIGRATING)
                self._log("migrating", job_id, failed, f"resume_work={record.checkpoint_work}")
                target = self._try_schedule(record)
            return MigrationDecision(
                job_id,
                failed,
                record.status,
                target,
                record.checkpoint_ref,
                record.checkpoint_work,
                record.failure_reason,
            )

    def job_outputs(self, job_id: str) -> Dict[str, bytes]:
        with self._lock:
            record = self.job(job_id)
            if record.status is not JobStatus.DONE:
                raise GridError(f"Job {job_id} is {record.status.value}, not Done")
            return dict(self._outputs[job_id])

    def stage_out(self, job_id: str) -> Dict[str, str]:
        """Copy a finished job's outputs to its OutputRef keys; returns key -> digest."""
        with self._lock:
            outputs = self.job_outputs(job_id)
            refs = {ref.rsplit("/", 1)[-1]: ref for ref in self.jobs[job_id].descriptor.output_refs}
            stored: Dict[str, str] = {}
            for name, data in outputs.items():
                key = refs.get(name, f"jobs/{job_id}/output/{name}")
                stored[key] = self.storage.put(key, data)
            return stored

    def event_log(self) -> str:
        with self._lock:
            return event_log_text(self.events)

    # -- internals --

    def _push(self, time: float, kind: str, target: str, attempt: int = 0, value: float = 0.0) -> None:
        heapq.heappush(self._queue, _Event(float(time), next(self._seq), kind, target, attempt, value))

    def _log(self, kind: str, job_id: str = "-", resource_id: str = "-", detail: str = "") -> None:
        event = GridEvent(self.now, kind, job_id, resource_id, detail)
        self.events.append(event)
        LOG.debug("%s", event.line())

    def _transition(self, record: JobRecord, target: JobStatus) -> None:
        if target not in STATUS_GRAPH[record.status]:
            raise IllegalTransition(record.job_id, record.status, target)
        record.status = target
        record.status_log.append((self.now, target))

    def _fail(self, record: JobRecord, reason: FailureReason, detail: str = "") -> None:
        self._transition(record, JobStatus.FAILED)
        record.failure_reason = reason
        record.failure_detail = detail
        record.finished_at = self.now
        if record.job_id in self._waiting:
            self._waiting.remove(record.job_id)
        self._log("failed", record.job_id, detail=f"reason={reason.value}")
        LOG.info("Job %s failed: %s %s", record.job_id, reason.value, detail)

    def _close_attempt(self, record: JobRecord, active: _Active, reason: str) -> None:
        attempt = record.resource_history[-1]
        attempt.end = self.now
        attempt.reason = reason
        self._busy[active.resource.id] -= 1
        self.history.record(active.resource.id, active.saved_work - active.start_work, self.now - active.started)

    def _dispatch(self, event: _Event) -> None:
        self.now = event.time
        if event.kind == "schedule":
            record = self.jobs[event.target]
            if record.status is JobStatus.SUBMITTED:
                self._try_schedule(record)
        elif event.kind == "outage":
            self._on_outage(event.target, event.value)
        elif event.kind == "recover":
            self._log("recovered", resource_id=event.target)
            self._drain_waiting()
        else:
            active = self._active.get(event.target)
            if active is None or active.attempt != event.attempt:
                return
            if event.kind == "checkpoint":
                self._on_checkpoint(self.jobs[event.target], active, int(event.value))
            else:
                self._on_complete(self.jobs[event.target], active)

    def _try_schedule(self, record: JobRecord) -> Optional[str]:
        jd = record.descriptor
        eligible = [
            resource
            for resource in self.resources.values()
            if jd.requirements <= resource.tags and resource.id != record.excluded
        ]
        if not eligible:
            self._fail(record, FailureReason.NO_MATCHING_RESOURCE)
            return None
        ranked = match_and_rank(jd, eligible, self.history, self.now)
        free = [resource for resource in ranked if self._busy[resource.id] < resource.slots]
        if not free:
            if record.job_id not in self._waiting:
                self._waiting.append(record.job_id)
                self._log("waiting", record.job_id)
            return None
        if record.job_id in self._waiting:
            self._waiting.remove(record.job_id)
        self._start(record, free[0])
        return free[0].id

    def _drain_waiting(self) -> None:
        for job_id in list(self._waiting):
            record = self.jobs[job_id]
            if not record.terminal:
                self._try_schedule(record)

    def _start(self, record: JobRecord, resource: Resource) -> None:
        self._transition(record, JobStatus.SCHEDULED)
        self._log("scheduled", record.job_id, resource.id)
        try:
            snapshot = self._load_snapshot(record) if record.checkpoint_ref else None
            workload = self.workloads[record.descriptor.executable](record.descriptor, self.storage)
            start_work = workload.start(snapshot)
        except (ValueError, RuntimeError) as exc:
            self._fail(record, FailureReason.WORKLOAD_ERROR, str(exc))
            return
        self._transition(record, JobStatus.RUNNING)
        record.attempt += 1
        record.resource_history.append(Attempt(resource.id, self.now))
        self._busy[resource.id] += 1
        active = _Active(workload, resource, record.attempt, self.now, start_work, start_work)
        self._active[record.job_id] = active
        record.total_work = workload.total_work
        remaining = max(workload.total_work - start_work, 0)
        self._log("running", record.job_id, resource.id, f"work={start_work}/{workload.total_work}")
        self._push(self.now + remaining / resource.speed, "complete", record.job_id, record.attempt)
        self._push_checkpoint(record, active, start_work)

    def _push_checkpoint(self, record: JobRecord, active: _Active, after: int) -> None:
        every = active.workload.checkpoint_every
        if every <= 0:
            return
        target = (after // every + 1) * every
        if target >= active.workload.total_work:
            return
        when = active.started + (target - active.start_work) / active.resource.speed
        self._push(when, "checkpoint", record.job_id, active.attempt, float(target))

    def _on_checkpoint(self, record: JobRecord, active: _Active, target: int) -> None:
        try:
            active.workload.run_to(target)
            snapshot = active.workload.snapshot()
            ref = self._store_snapshot(record, snapshot)
        except (ValueError, RuntimeError) as exc:
            del self._active[record.job_id]
            self._close_attempt(record, active, "error")
            self._fail(record, FailureReason.WORKLOAD_ERROR, str(exc))
            self._drain_waiting()
            return
        record.checkpoint_ref = ref
        record.checkpoint_work = snapshot.work
        active.saved_work = snapshot.work
        self._log("checkpoint", record.job_id, active.resource.id, f"work={snapshot.work} ref={ref}")
        self._push_checkpoint(record, active, snapshot.work)

    def _on_complete(self, record: JobRecord, active: _Active) -> None:
        del self._active[record.job_id]
        try:
            active.workload.run_to(active.workload.total_work)
            outputs = active.workload.finish()
        except (ValueError, RuntimeError) as exc:
            self._close_attempt(record, active, "error")
            self._fail(record, FailureReason.WORKLOAD_ERROR, str(exc))
            self._drain_waiting()
            return
        active.saved_work = active.workload.total_work
        self._close_attempt(record, active, "done")
        self._outputs[record.job_id] = outputs
        record.finished_at = self.now
        self._transition(record, JobStatus.DONE)
        self._log("done", record.job_id, active.resource.id, f"outputs={len(outputs)}")
        LOG.info("Job %s done on %s at t=%.6f", record.job_id, active.resource.id, self.now)
        self._drain_waiting()

    def _on_outage(self, resource_id: str, duration: float) -> None:
        self._log("outage", resource_id=resource_id, detail=f"until={self.now + duration:.6f}")
        self._push(self.now + duration, "recover", resource_id)
        for job_id in sorted(self._active):
            active = self._active.get(job_id)
            if active is not None and active.resource.id == resource_id:
                self.on_failure(job_id)

    def _store_snapshot(self, record: JobRecord, snapshot: WorkloadSnapshot) -> str:
        ref = f"jobs/{record.job_id}/checkpoint/{snapshot.work}"
        for name in sorted(snapshot.files):
            key = f"{ref}/{name}"
            if not self.storage.exists(key):
                self.storage.put(key, snapshot.files[name])
        if not self.storage.exists(ref):
            self.storage.put(ref, snapshot.state)
        return ref

    def _load_snapshot(self, record: JobRecord) -> WorkloadSnapshot:
        ref = record.checkpoint_ref
        assert ref is not None
        prefix = ref + "/"
        files = {key[len(prefix) :]: self.storage.get(key) for key in self.storage.keys(prefix)}
        return WorkloadSnapshot(record.checkpoint_work, self.storage.get(ref), files)


__all__ = [
    "AccountingHistory",
    "Attempt",
    "FailureReason",
    "Grid",
    "GridConfig",
    "GridConfigError",
    "GridError",
    "GridEvent",
    "IllegalTransition",
    "JobDescriptor",
    "JobRecord",
    "JobStatus",
    "MalformedJdl",
    "McmcWorkload",
    "MigrationDecision",
    "Resource",
    "STATUS_GRAPH",
    "UnknownExecutable",
    "UnknownInputRef",
    "UnknownJob",
    "Workload",
    "WorkloadSnapshot",
    "declared_speed",
    "event_log_text",
    "key_value_lines",
    "load_grid_config",
    "match_and_rank",
    "mean_throughput",
    "ranker_for",
    "resolve_ref",
]

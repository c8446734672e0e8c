"""Metropolis-coupled MCMC over trees, branch lengths and GTR+gamma parameters.

Each run owns `nchains` chain slots on a heating ladder. A slot keeps its
temperature and random stream for the whole analysis; swaps exchange only the
states. Traces are MrBayes-style `.p`/`.t` files written through a sink, and a
run can be checkpointed at any generation and resumed with byte-identical
output.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
import math
import os
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import special

from consensus import TREES_FOOTER, tree_line, trees_header
from mbscript import McmcSettings, ModelSpec, Rates
from phylo import (
    GammaRates,
    GtrParams,
    LikelihoodEngine,
    NonFiniteResult,
    PAIR_LABELS,
    RateMatrix,
    Tree,
    expand_exchangeabilities,
    log10_unrooted_trees,
    nni,
    random_addition_tree,
)
from seqio import Alignment, write_nexus

LOG = logging.getLogger(__name__)

BRANCH_PRIOR_RATE = 10.0
ALPHA_PRIOR_RATE = 1.0
BRANCH_TUNING = 2.0 * math.log(1.1)
ALPHA_TUNING = 2.0 * math.log(2.0)
DIRICHLET_CONCENTRATION = 300.0
MIN_SIMPLEX_VALUE = 1e-10
SWAP_SLOT = 0xFFFFFFFF

CHECKPOINT_MAGIC = b"PGCK"
CHECKPOINT_VERSION = 1


class ProposalKind(str, Enum):
    NNI = "nni"
    BRANCH = "branch_multiplier"
    ALPHA = "alpha_multiplier"
    FREQS = "freqs_dirichlet"
    RATES = "exch_dirichlet"


PROPOSAL_WEIGHTS: Dict[ProposalKind, float] = {
    ProposalKind.NNI: 0.35,
    ProposalKind.BRANCH: 0.40,
    ProposalKind.ALPHA: 0.10,
    ProposalKind.FREQS: 0.075,
    ProposalKind.RATES: 0.075,
}


class McmcError(RuntimeError):
    """Raised when an analysis cannot start, continue or be restored."""


class DigestMismatch(McmcError):
    def __init__(self, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(f"Checkpoint belongs to analysis {found[:12]}, not {expected[:12]}")


class CorruptCheckpoint(McmcError):
    pass


class SinkFailure(McmcError):
    pass


# ---- Trace sinks ------------------------------------------------------------


class TraceSink(Protocol):
    def append(self, name: str, data: bytes) -> None: ...

    def size(self, name: str) -> int: ...

    def truncate(self, name: str, size: int) -> None: ...

    def read(self, name: str) -> bytes: ...


class MemorySink:
    """In-process trace files; also used to carry snapshots between grid attempts."""

    def __init__(self, files: Optional[Mapping[str, bytes]] = None):
        self._files: Dict[str, bytearray] = {name: bytearray(data) for name, data in (files or {}).items()}
        self._lock = threading.Lock()

    def append(self, name: str, data: bytes) -> None:
        with self._lock:
            self._files.setdefault(name, bytearray()).extend(data)

    def size(self, name: str) -> int:
        with self._lock:
            return len(self._files.get(name, b""))

    def truncate(self, name: str, size: int) -> None:
        with self._lock:
            buffer = self._files.get(name)
            if buffer is None or len(buffer) < size:
                raise SinkFailure(f"Trace '{name}' is shorter than {size} bytes")
            del buffer[size:]

    def read(self, name: str) -> bytes:
        with self._lock:
            if name not in self._files:
                raise SinkFailure(f"No trace named '{name}'")
            return bytes(self._files[name])

    def names(self) -> List[str]:
        with self._lock:
            return sorted(self._files)

    def snapshot(self) -> Dict[str, bytes]:
        with self._lock:
            return {name: bytes(data) for name, data in self._files.items()}


class DirectorySink:
    def __init__(self, directory: os.PathLike | str):
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise SinkFailure(f"Cannot create trace directory {self.directory}: {exc}") from exc

    def _path(self, name: str) -> Path:
        return self.directory / name

    def append(self, name: str, data: bytes) -> None:
        try:
            with open(self._path(name), "ab") as handle:
                handle.write(data)
        except OSError as exc:
            raise SinkFailure(f"Cannot write trace {name}: {exc}") from exc

    def size(self, name: str) -> int:
        path = self._path(name)
        return path.stat().st_size if path.exists() else 0

    def truncate(self, name: str, size: int) -> None:
        try:
            with open(self._path(name), "r+b") as handle:
                handle.truncate(size)
        except OSError as exc:
            raise SinkFailure(f"Cannot truncate trace {name}: {exc}") from exc

    def read(self, name: str) -> bytes:
        try:
            return self._path(name).read_bytes()
        except OSError as exc:
            raise SinkFailure(f"Cannot read trace {name}: {exc}") from exc


# ---- Chain state ------------------------------------------------------------


@dataclass(frozen=True)
class ChainState:
    """Everything a chain carries across a swap; random streams stay with the slot."""

    tree: Tree
    rates: Tuple[float, ...]
    freqs: Tuple[float, ...]
    alpha: float
    nst: int
    log_prior: float = float("nan")
    log_likelihood: float = float("nan")

    @property
    def log_posterior(self) -> float:
        return self.log_prior + self.log_likelihood

    @cached_property
    def gtr(self) -> GtrParams:
        return GtrParams(expand_exchangeabilities(self.nst, self.rates), self.freqs)

    @cached_property
    def rate_matrix(self) -> RateMatrix:
        return RateMatrix(self.gtr)

    def gamma(self, model: ModelSpec) -> GammaRates:
        return _category_rates(self.alpha if model.rates is Rates.GAMMA else None)

    def normalized_exchangeabilities(self) -> Tuple[float, ...]:
        exch = np.asarray(self.gtr.exch)
        return tuple(float(x) for x in exch / exch.sum())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tree": self.tree.to_dict(),
            "rates": list(self.rates),
            "freqs": list(self.freqs),
            "alpha": self.alpha,
            "nst": self.nst,
            "log_prior": self.log_prior,
            "log_likelihood": self.log_likelihood,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "ChainState":
        return cls(
            tree=Tree.from_dict(payload["tree"]),
            rates=tuple(payload["rates"]),
            freqs=tuple(payload["freqs"]),
            alpha=float(payload["alpha"]),
            nst=int(payload["nst"]),
            log_prior=float(payload["log_prior"]),
            log_likelihood=float(payload["log_likelihood"]),
        )


@dataclass(frozen=True)
class TraceSample:
    generation: int
    log_likelihood: float
    tree_length: float
    alpha: float
    freqs: Tuple[float, ...]
    exch: Tuple[float, ...]
    tree: Tree

    @classmethod
    def of(cls, generation: int, state: ChainState) -> "TraceSample":
        return cls(
            generation,
            state.log_likelihood,
            state.tree.tree_length,
            state.alpha,
            state.freqs,
            state.normalized_exchangeabilities(),
            state.tree,
        )

    def parameter_row(self) -> str:
        values = [self.log_likelihood, self.tree_length, self.alpha, *self.freqs, *self.exch]
        return "\t".join([str(self.generation)] + [f"{value:.6f}" for value in values]) + "\n"


PARAMETER_HEADER = "\t".join(
    ["Gen", "LnL", "TL", "alpha", "pi(A)", "pi(C)", "pi(G)", "pi(T)"] + [f"r({pair})" for pair in PAIR_LABELS]
)


def trace_file_names(prefix: str, nruns: int) -> Tuple[str, ...]:
    """`.p` then `.t` for each run, in the order the files are created."""
    names: List[str] = []
    for run in range(1, nruns + 1):
        names.extend([f"{prefix}.run{run}.p", f"{prefix}.run{run}.t"])
    return tuple(names)


def heat(slot: int, heat_lambda: float) -> float:
    return 1.0 / (1.0 + heat_lambda * slot)


@lru_cache(maxsize=256)
def _category_rates(alpha: Optional[float]) -> GammaRates:
    return GammaRates.equal() if alpha is None else GammaRates(alpha)


# ---- Priors and proposals ---------------------------------------------------


def free_rate_count(nst: int) -> int:
    return {1: 0, 2: 2, 6: 6}[nst]


def log_prior(state: ChainState, model: ModelSpec) -> float:
    """Exp(10) branches, Exp(1) alpha, flat Dirichlets, uniform topology."""
    lengths = state.tree.lengths
    value = len(lengths) * math.log(BRANCH_PRIOR_RATE) - BRANCH_PRIOR_RATE * float(lengths.sum())
    value -= log10_unrooted_trees(state.tree.n_leaves) * math.log(10.0) if state.tree.n_leaves >= 3 else 0.0
    if model.rates is Rates.GAMMA:
        value += math.log(ALPHA_PRIOR_RATE) - ALPHA_PRIOR_RATE * state.alpha
    value += float(special.gammaln(4.0))
    k = free_rate_count(state.nst)
    if k:
        value += float(special.gammaln(k))
    return value


def proposal_mix(model: ModelSpec, n_taxa: int) -> Tuple[Tuple[ProposalKind, ...], np.ndarray]:
    """Applicable proposal kinds with weights renormalised to sum to one."""
    kinds = []
    for kind in PROPOSAL_WEIGHTS:
        if kind is ProposalKind.NNI and n_taxa < 4:
            continue
        if kind is ProposalKind.ALPHA and model.rates is not Rates.GAMMA:
            continue
        if kind is ProposalKind.RATES and model.nst == 1:
            continue
        kinds.append(kind)
    weights = np.array([PROPOSAL_WEIGHTS[kind] for kind in kinds])
    return tuple(kinds), weights / weights.sum()


def multiplier(value: float, u: float, tuning: float) -> Tuple[float, float]:
    """Multiplier move x' = x * exp(tuning * (u - 1/2)); log Hastings ratio log(x'/x)."""
    log_m = tuning * (u - 0.5)
    return value * math.exp(log_m), log_m


def _accept(u: float, log_ratio: float) -> bool:
    return u == 0.0 or math.log(u) < log_ratio


def _log_dirichlet(x: np.ndarray, concentration: np.ndarray) -> float:
    return float(
        special.gammaln(concentration.sum())
        - special.gammaln(concentration).sum()
        + ((concentration - 1.0) * np.log(x)).sum()
    )


def dirichlet_move(values: Sequence[float], rng: np.random.Generator) -> Tuple[Optional[Tuple[float, ...]], float]:
    """Dirichlet proposal centred on `values`; None when the draw hits the simplex boundary."""
    current = np.asarray(values, dtype=np.float64)
    forward = DIRICHLET_CONCENTRATION * current
    candidate = rng.dirichlet(forward)
    if candidate.min() < MIN_SIMPLEX_VALUE:
        return None, -math.inf
    candidate = candidate / candidate.sum()
    backward = DIRICHLET_CONCENTRATION * candidate
    log_h = _log_dirichlet(current, backward) - _log_dirichlet(candidate, forward)
    return tuple(float(x) for x in candidate), log_h


def _moved(state: ChainState, **changes: Any) -> ChainState:
    """Unscored copy of `state`; the rate matrix is reused when the model is untouched."""
    candidate = replace(state, log_prior=math.nan, log_likelihood=math.nan, **changes)
    if "rates" not in changes and "freqs" not in changes:
        for name in ("gtr", "rate_matrix"):
            if name in state.__dict__:
                candidate.__dict__[name] = state.__dict__[name]
    return candidate


def propose(
    state: ChainState,
    kind: ProposalKind,
    rng: np.random.Generator,
) -> Tuple[Optional[ChainState], float]:
    """Unscored candidate and log Hastings ratio; None when the move is impossible."""
    if kind is ProposalKind.NNI:
        internal = state.tree.internal_edges
        edge = internal[int(rng.integers(len(internal)))]
        return _moved(state, tree=nni(state.tree, edge, int(rng.integers(2)))), 0.0
    if kind is ProposalKind.BRANCH:
        edge = int(rng.integers(state.tree.n_edges))
        lengths = state.tree.lengths.copy()
        lengths[edge], log_h = multiplier(float(lengths[edge]), float(rng.random()), BRANCH_TUNING)
        if not (lengths[edge] > 0 and math.isfinite(lengths[edge])):
            return None, -math.inf
        return _moved(state, tree=state.tree.with_lengths(lengths)), log_h
    if kind is ProposalKind.ALPHA:
        alpha, log_h = multiplier(state.alpha, float(rng.random()), ALPHA_TUNING)
        if not (alpha > 0 and math.isfinite(alpha)):
            return None, -math.inf
        return _moved(state, alpha=alpha), log_h
    if kind is ProposalKind.FREQS:
        freqs, log_h = dirichlet_move(state.freqs, rng)
        return (None if freqs is None else _moved(state, freqs=freqs)), log_h
    rates, log_h = dirichlet_move(state.rates, rng)
    return (None if rates is None else _moved(state, rates=rates)), log_h


# ---- Random streams ---------------------------------------------------------


def chain_rng(seed: int, run: int, slot: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(run, slot))))


def _encode_state(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.tolist(), "dtype": str(value.dtype)}
    if isinstance(value, dict):
        return {key: _encode_state(item) for key, item in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _decode_state(value: Any) -> Any:
    if isinstance(value, dict):
        if "__ndarray__" in value:
            return np.array(value["__ndarray__"], dtype=value["dtype"])
        return {key: _decode_state(item) for key, item in value.items()}
    return value


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return _encode_state(rng.bit_generator.state)


def restore_rng(payload: Mapping[str, Any]) -> np.random.Generator:
    bit_generator = np.random.Philox()
    bit_generator.state = _decode_state(dict(payload))
    return np.random.Generator(bit_generator)


# ---- Digest -----------------------------------------------------------------


def settings_digest(
    alignment: Alignment,
    model: ModelSpec,
    settings: McmcSettings,
    blocks: int = 1,
    prior_only: bool = False,
) -> str:
    digest = hashlib.sha256()
    for part in (
        write_nexus(alignment),
        model.model_dump_json().encode("utf-8"),
        settings.model_dump_json().encode("utf-8"),
        f"blocks={blocks};prior_only={int(prior_only)}".encode("utf-8"),
    ):
        digest.update(len(part).to_bytes(8, "big"))
        digest.update(part)
    return digest.hexdigest()


# ---- Runs -------------------------------------------------------------------


@dataclass
class _Chain:
    temperature: float
    rng: np.random.Generator
    state: ChainState


@dataclass
class _Run:
    index: int
    chains: List[_Chain]
    swap_rng: np.random.Generator
    proposals: Counter = field(default_factory=Counter)
    accepted: Counter = field(default_factory=Counter)

    @property
    def cold(self) -> ChainState:
        return self.chains[0].state


@dataclass(frozen=True)
class RunSummary:
    digest: str
    generation: int
    trace_files: Tuple[str, ...]
    cold_states: Tuple[ChainState, ...]
    acceptance: Dict[str, Tuple[int, int]]

    def acceptance_rate(self, kind: str) -> float:
        tried, taken = self.acceptance.get(kind, (0, 0))
        return taken / tried if tried else 0.0


class McmcRun:
    """One analysis: `nruns` independent runs advanced in lock step."""

    def __init__(
        self,
        alignment: Alignment,
        model: ModelSpec,
        settings: McmcSettings,
        sink: TraceSink,
        *,
        prefix: str = "phylogrid",
        blocks: int = 1,
        prior_only: bool = False,
    ):
        if alignment.n_taxa < 3:
            raise McmcError("An analysis needs at least three taxa.")
        if blocks < 0:
            raise McmcError("blocks must be non-negative.")
        self.alignment = alignment
        self.model = model
        self.settings = settings
        self.sink = sink
        self.prefix = prefix
        self.blocks = blocks
        self.prior_only = prior_only
        self.digest = settings_digest(alignment, model, settings, blocks, prior_only)
        self.engine = LikelihoodEngine(alignment)
        self.kinds, self.weights = proposal_mix(model, alignment.n_taxa)
        self._cumulative = np.cumsum(self.weights)
        self.generation = 0
        self.runs: List[_Run] = []
        self.finished = False

    # -- construction --

    @property
    def total_generations(self) -> int:
        return self.settings.ngen * self.blocks

    def parameter_file(self, run: int) -> str:
        return f"{self.prefix}.run{run + 1}.p"

    def tree_file(self, run: int) -> str:
        return f"{self.prefix}.run{run + 1}.t"

    @property
    def trace_files(self) -> Tuple[str, ...]:
        return trace_file_names(self.prefix, self.settings.nruns)

    def _score(self, state: ChainState) -> ChainState:
        prior = log_prior(state, self.model)
        if self.prior_only:
            likelihood = 0.0
        else:
            likelihood = self.engine.log_likelihood(state.tree, state.rate_matrix, state.gamma(self.model))
        if not math.isfinite(prior + likelihood):
            raise NonFiniteResult("Log-posterior is not finite.")
        return replace(state, log_prior=prior, log_likelihood=likelihood)

    def _initial_state(self, rng: np.random.Generator) -> ChainState:
        def from_prior(generator: np.random.Generator, count: int) -> np.ndarray:
            return generator.exponential(1.0 / BRANCH_PRIOR_RATE, size=count)

        tree = random_addition_tree(self.alignment.taxa, rng, from_prior)
        k = free_rate_count(self.model.nst)
        state = ChainState(
            tree=tree,
            rates=tuple([1.0 / k] * k),
            freqs=(0.25, 0.25, 0.25, 0.25),
            alpha=1.0 / ALPHA_PRIOR_RATE,
            nst=self.model.nst,
        )
        return self._score(state)

    @classmethod
    def start(cls, alignment: Alignment, model: ModelSpec, settings: McmcSettings, sink: TraceSink, **options: Any) -> "McmcRun":
        run = cls(alignment, model, settings, sink, **options)
        for index in range(settings.nruns):
            chains = []
            for slot in range(settings.nchains):
                rng = chain_rng(settings.seed, index, slot)
                chains.append(_Chain(heat(slot, settings.heat_lambda), rng, run._initial_state(rng)))
            run.runs.append(_Run(index, chains, chain_rng(settings.seed, index, SWAP_SLOT)))
        for index in range(settings.nruns):
            run._write(run.parameter_file(index), f"[ID: {run.digest}]\n{PARAMETER_HEADER}\n")
            run._write(run.tree_file(index), trees_header(alignment.taxa, run.digest))
            run._sample(run.runs[index], 0)
        LOG.info(
            "Started analysis %s: %d run(s) x %d chain(s), %d generations",
            run.digest[:12], settings.nruns, settings.nchains, run.total_generations,
        )
        return run

    # -- stepping --

    def _write(self, name: str, text: str) -> None:
        try:
            self.sink.append(name, text.encode("utf-8"))
        except SinkFailure:
            raise
        except Exception as exc:
            raise SinkFailure(f"Writing {name} failed: {exc}") from exc

    def _sample(self, run: _Run, generation: int) -> None:
        sample = TraceSample.of(generation, run.cold)
        self._write(self.parameter_file(run.index), sample.parameter_row())
        self._write(self.tree_file(run.index), tree_line(f"gen.{generation}", sample.tree))

    def _step_chain(self, run: _Run, chain: _Chain) -> None:
        rng = chain.rng
        pick = int(np.searchsorted(self._cumulative, rng.random(), side="right"))
        kind = self.kinds[min(pick, len(self.kinds) - 1)]
        candidate, log_h = propose(chain.state, kind, rng)
        u = rng.random()
        run.proposals[kind.value] += 1
        if candidate is None:
            return
        try:
            candidate = self._score(candidate)
        except NonFiniteResult:
            LOG.debug("Rejected %s proposal with non-finite posterior", kind.value)
            return
        log_ratio = chain.temperature * (candidate.log_posterior - chain.state.log_posterior) + log_h
        if _accept(u, log_ratio):
            chain.state = candidate
            run.accepted[kind.value] += 1

    def _swap(self, run: _Run) -> None:
        if len(run.chains) < 2:
            return
        i = int(run.swap_rng.integers(len(run.chains) - 1))
        u = run.swap_rng.random()
        first, second = run.chains[i], run.chains[i + 1]
        log_ratio = (first.temperature - second.temperature) * (second.state.log_posterior - first.state.log_posterior)
        run.proposals["swap"] += 1
        if _accept(u, log_ratio):
            first.state, second.state = second.state, first.state
            run.accepted["swap"] += 1

    def _advance_run(self, run: _Run, start: int, target: int) -> None:
        for generation in range(start + 1, target + 1):
            for chain in run.chains:
                self._step_chain(run, chain)
            self._swap(run)
            if generation % self.settings.samplefreq == 0:
                self._sample(run, generation)

    def advance(self, target: Optional[int] = None) -> int:
        """Advance every run to generation `target` (default: the end)."""
        if self.finished:
            raise McmcError("Analysis already finished.")
        target = self.total_generations if target is None else min(target, self.total_generations)
        if target <= self.generation:
            return self.generation
        start = self.generation
        if len(self.runs) == 1:
            self._advance_run(self.runs[0], start, target)
        else:
            with concurrent.futures.ThreadPoolExecutor(max_workers=len(self.runs)) as executor:
                futures = [executor.submit(self._advance_run, run, start, target) for run in self.runs]
                for future in futures:
                    future.result()
        self.generation = target
        LOG.debug("Analysis %s at generation %d", self.digest[:12], target)
        return target

    def finish(self) -> RunSummary:
        self.advance()
        if not self.finished:
            for index in range(len(self.runs)):
                self._write(self.tree_file(index), TREES_FOOTER)
            self.finished = True
        return self.summary()

    def summary(self) -> RunSummary:
        acceptance: Dict[str, Tuple[int, int]] = {}
        for run in self.runs:
            for kind, tried in run.proposals.items():
                old = acceptance.get(kind, (0, 0))
                acceptance[kind] = (old[0] + tried, old[1] + run.accepted[kind])
        return RunSummary(
            self.digest,
            self.generation,
            self.trace_files,
            tuple(run.cold for run in self.runs),
            dict(sorted(acceptance.items())),
        )

    # -- checkpoints --

    def checkpoint(self) -> bytes:
        header = {
            "generation": self.generation,
            "finished": self.finished,
            "offsets": {name: self.sink.size(name) for name in self.trace_files},
            "swap_rngs": [rng_state(run.swap_rng) for run in self.runs],
            "proposals": [dict(run.proposals) for run in self.runs],
            "accepted": [dict(run.accepted) for run in self.runs],
        }
        states = [
            {"run": run.index, "slot": slot, "state": chain.state.to_dict(), "rng": rng_state(chain.rng)}
            for run in self.runs
            for slot, chain in enumerate(run.chains)
        ]
        body = bytearray()
        body += CHECKPOINT_MAGIC
        body += struct.pack(">H", CHECKPOINT_VERSION)
        digest = self.digest.encode("ascii")
        body += struct.pack(">H", len(digest)) + digest
        body += struct.pack(">Q", self.generation)
        for blob in [json.dumps(header, sort_keys=True).encode("utf-8")] + [
            json.dumps(entry, sort_keys=True).encode("utf-8") for entry in states
        ]:
            body += struct.pack(">I", len(blob)) + blob
        body += hashlib.sha256(body).digest()
        LOG.debug("Checkpoint of %s at generation %d (%d bytes)", self.digest[:12], self.generation, len(body))
        return bytes(body)

    @classmethod
    def resume(
        cls,
        data: bytes,
        alignment: Alignment,
        model: ModelSpec,
        settings: McmcSettings,
        sink: TraceSink,
        **options: Any,
    ) -> "McmcRun":
        digest, generation, header, states = read_checkpoint(data)
        run = cls(alignment, model, settings, sink, **options)
        if digest != run.digest:
            raise DigestMismatch(run.digest, digest)
        try:
            for name, offset in header["offsets"].items():
                sink.truncate(name, int(offset))
            run.generation = generation
            run.finished = bool(header.get("finished", False))
            by_run: Dict[int, List[Tuple[int, Mapping[str, Any]]]] = {}
            for entry in states:
                by_run.setdefault(int(entry["run"]), []).append((int(entry["slot"]), entry))
            for index in range(settings.nruns):
                entries = sorted(by_run[index], key=lambda item: item[0])
                if len(entries) != settings.nchains:
                    raise CorruptCheckpoint(f"Run {index} has {len(entries)} chains, expected {settings.nchains}")
                chains = [
                    _Chain(heat(slot, settings.heat_lambda), restore_rng(entry["rng"]), ChainState.from_dict(entry["state"]))
                    for slot, entry in entries
                ]
                restored = _Run(index, chains, restore_rng(header["swap_rngs"][index]))
                restored.proposals.update(header["proposals"][index])
                restored.accepted.update(header["accepted"][index])
                run.runs.append(restored)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise CorruptCheckpoint(f"Checkpoint contents are inconsistent: {exc}") from exc
        LOG.info("Resumed analysis %s at generation %d", run.digest[:12], generation)
        return run


def read_checkpoint(data: bytes) -> Tuple[str, int, Dict[str, Any], List[Dict[str, Any]]]:
    """Validate the container and return (digest, generation, header, states)."""
    if len(data) < 4 + 2 + 2 + 8 + 32 or data[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("Not a checkpoint (bad magic or too short)")
    body, checksum = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise CorruptCheckpoint("Checkpoint checksum does not match")
    try:
        (version,) = struct.unpack_from(">H", body, 4)
        if version != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(f"Unsupported checkpoint version {version}")
        (digest_length,) = struct.unpack_from(">H", body, 6)
        offset = 8
        digest = body[offset : offset + digest_length].decode("ascii")
        offset += digest_length
        (generation,) = struct.unpack_from(">Q", body, offset)
        offset += 8
        blobs = []
        while offset < len(body):
            (length,) = struct.unpack_from(">I", body, offset)
            offset += 4
            if offset + length > len(body):
                raise CorruptCheckpoint("Truncated checkpoint record")
            blobs.append(json.loads(body[offset : offset + length].decode("utf-8")))
            offset += length
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"Unreadable checkpoint: {exc}") from exc
    if not blobs:
        raise CorruptCheckpoint("Checkpoint has no header")
    return digest, int(generation), blobs[0], blobs[1:]


def run_mcmc(
    alignment: Alignment,
    model: ModelSpec,
    settings: McmcSettings,
    sink: TraceSink,
    **options: Any,
) -> RunSummary:
    """Run the whole analysis and close the tree files."""
    return McmcRun.start(alignment, model, settings, sink, **options).finish()

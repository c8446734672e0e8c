"""Tree-trace summaries: burn-in, split frequencies, majority-rule consensus, ASDSF."""

from __future__ import annotations

import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from phylo import Tree, parse_newick, write_newick
from seqio import MalformedFile, nexus_statements

LOG = logging.getLogger(__name__)

DEFAULT_BURNIN = 0.25
MIN_PARTITION_FREQUENCY = 0.1


class ConsensusError(ValueError):
    """Raised when tree samples cannot be summarised."""


class TaxonSetMismatch(ConsensusError):
    def __init__(self, expected: Sequence[str], found: Sequence[str]):
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(f"Samples disagree on the taxon set: {sorted(expected)} vs {sorted(found)}")


class IncompatibleSplits(ConsensusError):
    def __init__(self, first: "Split", second: "Split"):
        self.first = first
        self.second = second
        super().__init__(f"Splits {first.bits()} and {second.bits()} cannot coexist in one tree")


@dataclass(frozen=True, order=True)
class Split:
    """A bipartition as a bitmask over taxon indices, taxon 0 always on the clear side."""

    mask: int
    ntaxa: int

    def __post_init__(self) -> None:
        full = (1 << self.ntaxa) - 1
        mask = self.mask & full
        if mask & 1:
            mask = full ^ mask
        if mask == 0:
            raise ConsensusError("A split needs taxa on both sides.")
        object.__setattr__(self, "mask", mask)

    @property
    def size(self) -> int:
        return bin(self.mask).count("1")

    @property
    def trivial(self) -> bool:
        return self.size == 1 or self.size == self.ntaxa - 1

    def contains(self, other: "Split") -> bool:
        return self.mask & other.mask == other.mask

    def compatible(self, other: "Split") -> bool:
        # both sides exclude taxon 0, so the fourth (covering) case never occurs
        overlap = self.mask & other.mask
        return overlap == 0 or overlap == self.mask or overlap == other.mask

    def bits(self) -> str:
        return "".join("1" if self.mask >> i & 1 else "0" for i in range(self.ntaxa))

    def members(self, taxa: Sequence[str]) -> List[str]:
        return [name for i, name in enumerate(taxa) if self.mask >> i & 1]


@dataclass(frozen=True)
class TreeSample:
    generation: int
    tree: Tree


Sample = Union[Tree, TreeSample]


@dataclass(frozen=True)
class SplitSummary:
    frequency: float
    mean_length: float


@dataclass(frozen=True)
class ConsensusTree:
    tree: Tree
    clade_support: Dict[int, float]
    splits: Dict[Split, SplitSummary]
    n_samples: int

    @property
    def mean_branch_lengths(self) -> np.ndarray:
        return self.tree.lengths


def _tree(sample: Sample) -> Tree:
    return sample.tree if isinstance(sample, TreeSample) else sample


# ---- Burn-in ----------------------------------------------------------------


def burn_in_filter(samples: Sequence[Sample], fraction: float) -> List[Sample]:
    """Drop the first floor(fraction * N) samples."""
    if not samples:
        raise ConsensusError("No samples to filter.")
    if not 0.0 <= fraction < 1.0:
        raise ConsensusError(f"Burn-in fraction must lie in [0, 1), got {fraction!r}")
    return list(samples[math.floor(fraction * len(samples)) :])


def burn_in_by_generation(samples: Sequence[TreeSample], generations: int) -> List[TreeSample]:
    """Drop samples taken before `generations` steps."""
    if not samples:
        raise ConsensusError("No samples to filter.")
    kept = [sample for sample in samples if sample.generation >= generations]
    if not kept:
        raise ConsensusError(f"Burn-in of {generations} generations discards every sample.")
    return kept


# ---- Split tallies ----------------------------------------------------------


@dataclass
class _Tally:
    taxa: Tuple[str, ...]
    n_samples: int
    counts: Counter
    length_sums: Dict[int, float]
    terminal_sums: Dict[int, float]


def _reindex(tree: Tree, taxa: Tuple[str, ...]) -> Dict[int, float]:
    """Edge masks and lengths of `tree` expressed in the index order of `taxa`."""
    if tree.leaves == taxa:
        return tree.split_lengths()
    if set(tree.leaves) != set(taxa):
        raise TaxonSetMismatch(taxa, tree.leaves)
    position = [taxa.index(name) for name in tree.leaves]
    full = (1 << len(taxa)) - 1
    remapped: Dict[int, float] = {}
    for mask, length in tree.split_lengths().items():
        moved = 0
        for i, target in enumerate(position):
            if mask >> i & 1:
                moved |= 1 << target
        if moved & 1:
            moved = full ^ moved
        remapped[moved] = length
    return remapped


def _tally(samples: Sequence[Sample], taxa: Optional[Tuple[str, ...]] = None) -> _Tally:
    if not samples:
        raise ConsensusError("No tree samples given.")
    trees = [_tree(sample) for sample in samples]
    taxa = taxa or trees[0].leaves
    ntaxa = len(taxa)
    counts: Counter = Counter()
    length_sums: Dict[int, float] = defaultdict(float)
    terminal_sums: Dict[int, float] = defaultdict(float)
    for tree in trees:
        for mask, length in _reindex(tree, taxa).items():
            size = bin(mask).count("1")
            if size == 1 or size == ntaxa - 1:
                terminal_sums[mask] += length
            else:
                counts[mask] += 1
                length_sums[mask] += length
    return _Tally(taxa, len(trees), counts, dict(length_sums), dict(terminal_sums))


def split_summaries(samples: Sequence[Sample]) -> Dict[Split, SplitSummary]:
    tally = _tally(samples)
    ntaxa = len(tally.taxa)
    return {
        Split(mask, ntaxa): SplitSummary(count / tally.n_samples, tally.length_sums[mask] / count)
        for mask, count in sorted(tally.counts.items())
    }


def split_frequencies(samples: Sequence[Sample]) -> Dict[Split, float]:
    """Posterior frequency of every non-trivial split seen in the samples."""
    return {split: summary.frequency for split, summary in split_summaries(samples).items()}


# ---- Consensus --------------------------------------------------------------


def majority_rule_consensus(samples: Sequence[Sample], threshold: float = 0.5) -> ConsensusTree:
    """Tree of the splits with frequency > threshold, rooted at taxon 0 for construction."""
    tally = _tally(samples)
    taxa = tally.taxa
    n = len(taxa)
    summaries = {
        Split(mask, n): SplitSummary(count / tally.n_samples, tally.length_sums[mask] / count)
        for mask, count in sorted(tally.counts.items())
    }
    retained = sorted(
        (split for split, summary in summaries.items() if summary.frequency > threshold),
        key=lambda split: (-split.size, split.mask),
    )
    for i, first in enumerate(retained):
        for second in retained[i + 1 :]:
            if not first.compatible(second):
                raise IncompatibleSplits(first, second)

    terminal_mean = {mask: total / tally.n_samples for mask, total in tally.terminal_sums.items()}
    if n == 2:
        tree = Tree(taxa, np.array([(0, 1)]), np.array([terminal_mean[0b10]]))
        return ConsensusTree(tree, {}, summaries, tally.n_samples)

    full = (1 << n) - 1
    root = n
    clade_node = {split.mask: n + 1 + i for i, split in enumerate(retained)}
    edges: List[Tuple[int, int]] = []
    lengths: List[float] = []
    support: Dict[int, float] = {}

    def parent_of(mask: int) -> int:
        # retained is sorted by decreasing size, so the last container is the smallest
        best = root
        for split in retained:
            if split.mask != mask and split.mask & mask == mask:
                best = clade_node[split.mask]
        return best

    for split in retained:
        support[len(edges)] = summaries[split].frequency
        edges.append((parent_of(split.mask), clade_node[split.mask]))
        lengths.append(summaries[split].mean_length)
    edges.append((root, 0))
    lengths.append(terminal_mean[full ^ 1])
    for leaf in range(1, n):
        edges.append((parent_of(1 << leaf), leaf))
        lengths.append(terminal_mean[1 << leaf])
    tree = Tree(taxa, np.array(edges), np.array(lengths))
    LOG.info("Consensus of %d samples keeps %d of %d splits", tally.n_samples, len(retained), len(summaries))
    return ConsensusTree(tree, support, summaries, tally.n_samples)


# ---- Convergence ------------------------------------------------------------


def asdsf(*runs: Sequence[Sample], min_frequency: float = MIN_PARTITION_FREQUENCY) -> float:
    """Average standard deviation of split frequencies across two or more runs."""
    if len(runs) < 2:
        raise ConsensusError("ASDSF needs at least two runs.")
    taxa = _tree(runs[0][0]).leaves if runs[0] else None
    if taxa is None or any(not run for run in runs):
        raise ConsensusError("Every run needs at least one sample.")
    frequencies = []
    for run in runs:
        leaves = _tree(run[0]).leaves
        if set(leaves) != set(taxa):
            raise TaxonSetMismatch(taxa, leaves)
        tally = _tally(run, taxa)
        frequencies.append({mask: count / tally.n_samples for mask, count in tally.counts.items()})
    union = sorted(set().union(*frequencies))
    deviations = []
    for mask in union:
        values = np.array([freqs.get(mask, 0.0) for freqs in frequencies])
        if values.max() >= min_frequency:
            deviations.append(float(values.std()))
    return float(np.mean(deviations)) if deviations else 0.0


# ---- Trees files ------------------------------------------------------------


def trees_header(taxa: Sequence[str], digest: Optional[str] = None) -> str:
    lines = ["#NEXUS"]
    if digest is not None:
        lines.append(f"[ID: {digest}]")
    lines.append("begin trees;")
    lines.append("  translate")
    for i, name in enumerate(taxa, 1):
        sep = ";" if i == len(taxa) else ","
        lines.append(f"    {i} {_nexus_label(name)}{sep}")
    return "\n".join(lines) + "\n"


def tree_line(name: str, tree: Tree, supports: Optional[Mapping[int, float]] = None) -> str:
    numbers = [str(i) for i in range(1, tree.n_leaves + 1)]
    return f"  tree {name} = [&U] {write_newick(tree, supports, numbers)}\n"


TREES_FOOTER = "end;\n"


def _nexus_label(name: str) -> str:
    if re.search(r"[\s()\[\]{}/\\,;:=*'\"`<>^]", name):
        return "'" + name.replace("'", "''") + "'"
    return name


def _translate_table(text: str) -> Dict[str, str]:
    body = re.sub(r"^\s*translate\b", "", text, count=1, flags=re.IGNORECASE)
    table: Dict[str, str] = {}
    for entry in body.split(","):
        entry = entry.strip()
        if not entry:
            continue
        key, _, name = entry.partition(" ")
        name = name.strip()
        if len(name) >= 2 and name[0] == name[-1] == "'":
            name = name[1:-1].replace("''", "'")
        table[key] = name
    return table


def read_tree_trace(data: bytes | str) -> List[TreeSample]:
    """Read every tree of a NEXUS trees block; `gen.N` names carry the generation."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    lines = text.split("\n")
    first = next((i for i, line in enumerate(lines) if line.strip()), None)
    if first is None or not lines[first].strip().upper().startswith("#NEXUS"):
        raise MalformedFile("Tree files must start with #NEXUS", None if first is None else first + 1)
    lines[first] = ""
    translate: Dict[str, str] = {}
    in_trees = False
    samples: List[TreeSample] = []
    taxa: Optional[Tuple[str, ...]] = None
    for statement in nexus_statements(lines):
        words = statement.text.split()
        if not words:
            continue
        command = words[0].lower()
        if command == "begin":
            in_trees = len(words) > 1 and words[1].lower() == "trees"
        elif command == "end":
            in_trees = False
        elif in_trees and command == "translate":
            translate = _translate_table(statement.text)
            taxa = tuple(translate.values())
        elif in_trees and command == "tree":
            name, sep, newick = statement.text.strip()[4:].partition("=")
            if not sep:
                raise MalformedFile("Tree statement without '='", statement.line)
            name = name.strip().lstrip("*").strip()
            match = re.fullmatch(r"gen\.(\d+)", name)
            generation = int(match.group(1)) if match else len(samples)
            tree = parse_newick(newick.strip() + ";", taxa=taxa, translate=translate or None)
            if taxa is None:
                taxa = tree.leaves
            samples.append(TreeSample(generation, tree))
    LOG.debug("Read %d trees", len(samples))
    return samples


def write_consensus(ct: ConsensusTree, name: str = "con_50_majrule") -> bytes:
    text = trees_header(ct.tree.leaves) + tree_line(name, ct.tree, ct.clade_support) + TREES_FOOTER
    return text.encode("utf-8")


def split_table(
    summaries: Mapping[Split, SplitSummary],
    comments: Iterable[str] = (),
) -> bytes:
    lines = [f"# {comment}" for comment in comments]
    lines.append("bitmask\tfrequency\tmean_length")
    ordered = sorted(summaries.items(), key=lambda item: (-item[1].frequency, item[0].mask))
    for split, summary in ordered:
        lines.append(f"{split.bits()}\t{summary.frequency:.6f}\t{summary.mean_length:.6f}")
    return ("\n".join(lines) + "\n").encode("utf-8")

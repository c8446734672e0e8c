"""Trees, Newick I/O, the GTR+gamma substitution model and pruning likelihood.

Trees are unrooted. Leaves are node ids 0..n-1 (in `Tree.leaves` order) and
internal nodes follow from n upward; every edge carries a positive length in
expected substitutions per site. Likelihoods use Felsenstein pruning over
compressed site patterns with per-pattern rescaling.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, special

from seqio import Alignment

LOG = logging.getLogger(__name__)

NUCLEOTIDES = "ACGT"
# exchangeability order
PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
PAIR_LABELS = ("AC", "AG", "AT", "CG", "CT", "GT")
TRANSITIONS = frozenset({"AG", "CT"})
SCALE_THRESHOLD = 1e-100
EIGEN_CONDITION_LIMIT = 1e12

_IUPAC = {
    "A": "A", "C": "C", "G": "G", "T": "T",
    "R": "AG", "Y": "CT", "S": "CG", "W": "AT", "K": "GT", "M": "AC",
    "B": "CGT", "D": "AGT", "H": "ACT", "V": "ACG",
    "N": "ACGT", "-": "ACGT", "?": "ACGT",
}
TIP_TABLE = np.zeros((256, 4))
for _symbol, _bases in _IUPAC.items():
    for _base in _bases:
        TIP_TABLE[ord(_symbol), NUCLEOTIDES.index(_base)] = 1.0


class PhyloError(ValueError):
    """Raised for invalid trees, model parameters or likelihood inputs."""


class MalformedNewick(PhyloError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at position {position}")


class NonFiniteResult(PhyloError):
    """Numerics produced NaN or infinity (degenerate parameters)."""


class TaxonMismatch(PhyloError):
    def __init__(self, missing: Sequence[str], extra: Sequence[str]):
        self.missing = tuple(missing)
        self.extra = tuple(extra)
        super().__init__(f"Tree and alignment taxa differ (missing={list(missing)}, extra={list(extra)})")


# ---- Tree -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Tree:
    leaves: Tuple[str, ...]
    edges: np.ndarray
    lengths: np.ndarray

    def __post_init__(self) -> None:
        leaves = tuple(self.leaves)
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        lengths = np.array(self.lengths, dtype=np.float64).reshape(-1)
        n = len(leaves)
        if n < 2:
            raise PhyloError("A tree needs at least two leaves.")
        if len(set(leaves)) != n:
            raise PhyloError("Leaf names must be unique.")
        if len(lengths) != len(edges):
            raise PhyloError(f"{len(edges)} edges but {len(lengths)} branch lengths.")
        n_nodes = len(edges) + 1
        if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
            raise PhyloError("Node ids must be 0..n_nodes-1 with one edge fewer than nodes.")
        if not np.all(np.isfinite(lengths)) or np.any(lengths <= 0):
            raise PhyloError("Branch lengths must be finite and positive.")
        degree = np.bincount(edges.ravel(), minlength=n_nodes)
        if n_nodes < n or np.any(degree[:n] != 1):
            raise PhyloError("Every leaf must have exactly one incident edge.")
        if np.any(degree[n:] < 3):
            raise PhyloError("Internal nodes need degree three or more.")
        edges.flags.writeable = False
        lengths.flags.writeable = False
        object.__setattr__(self, "leaves", leaves)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "lengths", lengths)
        seen = {0}
        frontier = [0]
        while frontier:
            for other, _ in self.neighbors[frontier.pop()]:
                if other not in seen:
                    seen.add(other)
                    frontier.append(other)
        # n_nodes - 1 edges plus connectivity means acyclic
        if len(seen) != n_nodes:
            raise PhyloError("Tree is not connected.")

    @classmethod
    def _derived(cls, leaves: Tuple[str, ...], edges: np.ndarray, lengths: np.ndarray) -> "Tree":
        """Build without validation; only for rearrangements of a valid tree."""
        tree = object.__new__(cls)
        edges = np.asarray(edges, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.float64)
        edges.flags.writeable = False
        lengths.flags.writeable = False
        object.__setattr__(tree, "leaves", leaves)
        object.__setattr__(tree, "edges", edges)
        object.__setattr__(tree, "lengths", lengths)
        return tree

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @property
    def n_nodes(self) -> int:
        return len(self.edges) + 1

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def tree_length(self) -> float:
        return float(self.lengths.sum())

    @cached_property
    def neighbors(self) -> List[List[Tuple[int, int]]]:
        """Per node, (neighbour, edge index) pairs ordered by edge index."""
        adjacency: List[List[Tuple[int, int]]] = [[] for _ in range(self.n_nodes)]
        for index, (u, v) in enumerate(self.edges.tolist()):
            adjacency[u].append((v, index))
            adjacency[v].append((u, index))
        return adjacency

    @property
    def is_binary(self) -> bool:
        return self.n_leaves >= 3 and all(len(adj) == 3 for adj in self.neighbors[self.n_leaves :])

    @cached_property
    def internal_edges(self) -> Tuple[int, ...]:
        n = self.n_leaves
        return tuple(i for i, (u, v) in enumerate(self.edges.tolist()) if u >= n and v >= n)

    def postorder(self, root: int) -> List[Tuple[int, int, int]]:
        """(node, parent, edge) triples with children before parents; root last."""
        order: List[Tuple[int, int, int]] = []
        stack = [(root, -1, -1, False)]
        while stack:
            node, parent, edge, expanded = stack.pop()
            if expanded:
                order.append((node, parent, edge))
                continue
            stack.append((node, parent, edge, True))
            for child, child_edge in reversed(self.neighbors[node]):
                if child != parent:
                    stack.append((child, node, child_edge, False))
        return order

    @cached_property
    def edge_masks(self) -> Tuple[int, ...]:
        """Leaf bitmask of each edge, oriented away from leaf 0."""
        masks = [0] * self.n_nodes
        by_edge = [0] * self.n_edges
        for node, parent, edge in self.postorder(0):
            if node < self.n_leaves and node != 0:
                masks[node] = 1 << node
            if parent >= 0:
                masks[parent] |= masks[node]
                by_edge[edge] = masks[node]
        return tuple(by_edge)

    def splits(self) -> frozenset:
        """Non-trivial bipartitions as canonical bitmasks (taxon 0 bit clear)."""
        return frozenset(self.edge_masks[e] for e in self.internal_edges)

    def split_lengths(self) -> Dict[int, float]:
        return {mask: float(length) for mask, length in zip(self.edge_masks, self.lengths.tolist())}

    def same_topology(self, other: "Tree") -> bool:
        return self.leaves == other.leaves and self.splits() == other.splits()

    def with_lengths(self, lengths: np.ndarray) -> "Tree":
        lengths = np.array(lengths, dtype=np.float64)
        if lengths.shape != self.lengths.shape or not np.all(np.isfinite(lengths)) or np.any(lengths <= 0):
            raise PhyloError("Branch lengths must be finite, positive and one per edge.")
        tree = Tree._derived(self.leaves, self.edges, lengths)
        tree.__dict__["neighbors"] = self.neighbors
        return tree

    def to_dict(self) -> Dict[str, object]:
        return {"leaves": list(self.leaves), "edges": self.edges.tolist(), "lengths": self.lengths.tolist()}

    @classmethod
    def from_dict(cls, payload: Mapping[str, object]) -> "Tree":
        return cls(tuple(payload["leaves"]), np.array(payload["edges"]), np.array(payload["lengths"]))  # type: ignore[arg-type]


# ---- Newick -----------------------------------------------------------------

_NEWICK_TOKEN = re.compile(
    r"\s*(?:(?P<comment>\[[^\]]*\])|(?P<punct>[(),:;])|'(?P<quoted>(?:[^']|'')*)'|(?P<word>[^\s(),:;'\[\]]+))"
)
_NEWICK_SPECIAL = set("()[],:; \t\n'")


def _newick_tokens(text: str) -> List[Tuple[str, str, int]]:
    tokens: List[Tuple[str, str, int]] = []
    position = 0
    while position < len(text):
        match = _NEWICK_TOKEN.match(text, position)
        if match is None or match.end() == position:
            if text[position:].strip() == "":
                break
            raise MalformedNewick(f"Unexpected character {text[position]!r}", position)
        start = match.start(match.lastgroup) if match.lastgroup else position
        if match.lastgroup == "punct":
            tokens.append((match.group("punct"), match.group("punct"), start))
        elif match.lastgroup == "quoted":
            tokens.append(("word", match.group("quoted").replace("''", "'"), start))
        elif match.lastgroup == "word":
            tokens.append(("word", match.group("word"), start))
        position = match.end()
    return tokens


def parse_newick(
    text: str,
    taxa: Optional[Sequence[str]] = None,
    translate: Optional[Mapping[str, str]] = None,
) -> Tree:
    """Parse Newick with mandatory branch lengths.

    A bifurcating root is collapsed into a single edge. Internal labels (for
    example support values) are accepted and dropped. When `taxa` is given the
    leaves are indexed in that order.
    """
    children: List[List[int]] = []
    names: List[Optional[str]] = []
    lengths: List[Optional[float]] = []
    starts: List[int] = []

    def new_node(position: int) -> int:
        children.append([])
        names.append(None)
        lengths.append(None)
        starts.append(position)
        return len(children) - 1

    stack: List[int] = []
    root: Optional[int] = None
    last: Optional[int] = None
    state = "node"  # node | after | length | done
    tokens = _newick_tokens(text)
    for kind, value, position in tokens:
        if state == "done":
            raise MalformedNewick("Text after ';'", position)
        if state == "node":
            if kind == "(":
                node = new_node(position)
                if stack:
                    children[stack[-1]].append(node)
                elif root is None:
                    root = node
                else:
                    raise MalformedNewick("Second top-level subtree", position)
                stack.append(node)
            elif kind == "word" and stack:
                leaf = new_node(position)
                names[leaf] = value
                children[stack[-1]].append(leaf)
                last, state = leaf, "after"
            else:
                raise MalformedNewick(f"Expected a subtree but found {value!r}", position)
        elif state == "length":
            if kind != "word":
                raise MalformedNewick("Expected a branch length", position)
            try:
                lengths[last] = float(value)  # type: ignore[index]
            except ValueError:
                raise MalformedNewick(f"Bad branch length {value!r}", position) from None
            state = "tail"
        else:
            if kind == "word" and state == "after" and last is not None and children[last]:
                names[last] = value
            elif kind == ":" and state == "after":
                state = "length"
            elif kind == ",":
                if not stack:
                    raise MalformedNewick("',' outside parentheses", position)
                state = "node"
            elif kind == ")":
                if not stack:
                    raise MalformedNewick("Unbalanced ')'", position)
                last, state = stack.pop(), "after"
            elif kind == ";":
                if stack:
                    raise MalformedNewick("Unbalanced '('", position)
                state = "done"
            else:
                raise MalformedNewick(f"Unexpected {value!r}", position)
    if state != "done" or root is None:
        raise MalformedNewick("Newick must end with ';'", len(text))

    for node, kids in enumerate(children):
        if node != root and kids and len(kids) < 2:
            raise MalformedNewick("Internal node with a single child", starts[node])
        if node != root:
            if lengths[node] is None:
                raise MalformedNewick("Missing branch length", starts[node])
            if not lengths[node] > 0 or not math.isfinite(lengths[node]):  # type: ignore[operator]
                raise MalformedNewick("Branch lengths must be positive", starts[node])
    if len(children[root]) < 2:
        raise MalformedNewick("Root needs at least two children", starts[root])

    leaf_nodes = [node for node, kids in enumerate(children) if not kids]
    leaf_names = []
    for node in leaf_nodes:
        name = names[node] or ""
        leaf_names.append(translate.get(name, name) if translate else name)
    if len(set(leaf_names)) != len(leaf_names):
        raise MalformedNewick("Duplicate leaf name", starts[leaf_nodes[0]])
    if taxa is not None:
        if set(taxa) != set(leaf_names):
            raise TaxonMismatch(sorted(set(taxa) - set(leaf_names)), sorted(set(leaf_names) - set(taxa)))
        order = tuple(taxa)
    else:
        order = tuple(leaf_names)

    node_id: Dict[int, int] = {node: order.index(name) for node, name in zip(leaf_nodes, leaf_names)}
    next_id = len(order)
    collapse = len(children[root]) == 2
    for node, kids in enumerate(children):
        if kids and not (collapse and node == root):
            node_id[node] = next_id
            next_id += 1

    edges: List[Tuple[int, int]] = []
    edge_lengths: List[float] = []
    for node, kids in enumerate(children):
        if collapse and node == root:
            continue
        for child in kids:
            edges.append((node_id[node], node_id[child]))
            edge_lengths.append(lengths[child])  # type: ignore[arg-type]
    if collapse:
        left, right = children[root]
        edges.append((node_id[left], node_id[right]))
        edge_lengths.append(lengths[left] + lengths[right])  # type: ignore[operator]
    return Tree(order, np.array(edges), np.array(edge_lengths))


def _quote_name(name: str) -> str:
    if any(char in _NEWICK_SPECIAL for char in name):
        return "'" + name.replace("'", "''") + "'"
    return name


def write_newick(
    tree: Tree,
    supports: Optional[Mapping[int, float]] = None,
    names: Optional[Sequence[str]] = None,
) -> str:
    """Deterministic Newick rooted at leaf 0's neighbour.

    `supports` maps internal edge index to a posterior probability written as
    the internal node label. `names` overrides leaf labels by leaf index.
    """
    labels = [_quote_name(name) for name in (names if names is not None else tree.leaves)]
    if tree.n_leaves == 2:
        half = format(float(tree.lengths[0]) / 2.0, ".12g")
        return f"({labels[0]}:{half},{labels[1]}:{half});"
    root = tree.neighbors[0][0][0]
    text: Dict[int, str] = {}
    lowest: Dict[int, int] = {}
    for node, parent, edge in tree.postorder(root):
        kids = [child for child, _ in tree.neighbors[node] if child != parent]
        if not kids:
            body = labels[node]
            lowest[node] = node
        else:
            kids.sort(key=lowest.__getitem__)
            lowest[node] = lowest[kids[0]]
            body = "(" + ",".join(text.pop(child) for child in kids) + ")"
            if supports is not None and edge in supports:
                body += format(supports[edge], ".3f")
        if parent >= 0:
            body += ":" + format(float(tree.lengths[edge]), ".12g")
        text[node] = body
    return text[root] + ";"


# ---- Topology enumeration and rearrangement ---------------------------------


def _add_leaf(edges: List[Tuple[int, int]], edge_index: int, leaf: int, new_node: int) -> None:
    u, v = edges[edge_index]
    edges[edge_index] = (u, new_node)
    edges.append((new_node, v))
    edges.append((new_node, leaf))


def _starting_edges(n: int) -> List[Tuple[int, int]]:
    if n == 2:
        return [(0, 1)]
    return [(n, 0), (n, 1), (n, 2)]


def all_topologies(taxa: Sequence[str], length: float = 0.1) -> Iterator[Tree]:
    """Every unrooted binary topology over `taxa`, by stepwise addition."""
    n = len(taxa)
    if n < 3:
        raise PhyloError("Enumeration needs at least three taxa.")
    stack: List[Tuple[int, List[Tuple[int, int]]]] = [(3, _starting_edges(n))]
    while stack:
        leaf, edges = stack.pop()
        if leaf == n:
            yield Tree(tuple(taxa), np.array(edges), np.full(len(edges), length))
            continue
        for edge_index in reversed(range(len(edges))):
            grown = list(edges)
            _add_leaf(grown, edge_index, leaf, n + leaf - 2)
            stack.append((leaf + 1, grown))


def random_addition_tree(
    taxa: Sequence[str],
    rng: np.random.Generator,
    length_sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None,
) -> Tree:
    """Random binary topology by sequential random addition; lengths from the sampler."""
    n = len(taxa)
    if n < 2:
        raise PhyloError("A tree needs at least two leaves.")
    edges = _starting_edges(n)
    for leaf in range(3, n):
        _add_leaf(edges, int(rng.integers(len(edges))), leaf, n + leaf - 2)
    if length_sampler is None:
        lengths = rng.exponential(0.1, size=len(edges))
    else:
        lengths = length_sampler(rng, len(edges))
    return Tree(tuple(taxa), np.array(edges), np.maximum(lengths, np.finfo(float).tiny))


def nni(tree: Tree, edge_index: int, choice: int) -> Tree:
    """Nearest-neighbour interchange around an internal edge (u, v).

    The first neighbour of u (by edge index) is exchanged with neighbour
    `choice` (0 or 1) of v. Branch lengths travel with their edges.
    """
    if edge_index not in tree.internal_edges:
        raise PhyloError(f"Edge {edge_index} is not an internal edge.")
    u, v = (int(x) for x in tree.edges[edge_index])
    u_side = [(node, edge) for node, edge in tree.neighbors[u] if edge != edge_index]
    v_side = [(node, edge) for node, edge in tree.neighbors[v] if edge != edge_index]
    if len(u_side) != 2 or len(v_side) != 2:
        raise PhyloError("NNI needs degree-three endpoints.")
    a, a_edge = u_side[0]
    c, c_edge = v_side[choice]
    edges = tree.edges.copy()
    edges[a_edge] = (v, a)
    edges[c_edge] = (u, c)
    return Tree._derived(tree.leaves, edges, tree.lengths)


def _double_factorial(k: int) -> int:
    return math.prod(range(k, 0, -2)) if k > 0 else 1


def count_unrooted_trees(n: int) -> int:
    """(2n-5)!! distinct unrooted binary leaf-labelled trees."""
    if n < 3:
        raise PhyloError("Tree counts are defined for n >= 3.")
    return _double_factorial(2 * n - 5)


def count_rooted_trees(n: int) -> int:
    if n < 2:
        raise PhyloError("Rooted tree counts are defined for n >= 2.")
    return _double_factorial(2 * n - 3)


def log10_unrooted_trees(n: int) -> float:
    """log10 of (2n-5)!! via (2n-4)! / (2^(n-2) (n-2)!), usable for huge n."""
    if n < 3:
        raise PhyloError("Tree counts are defined for n >= 3.")
    value = special.gammaln(2 * n - 3) - (n - 2) * math.log(2.0) - special.gammaln(n - 1)
    return float(value / math.log(10.0))


# ---- Substitution model -----------------------------------------------------


@dataclass(frozen=True)
class GtrParams:
    exch: Tuple[float, ...]
    freqs: Tuple[float, ...]

    def __post_init__(self) -> None:
        exch = tuple(float(x) for x in self.exch)
        freqs = tuple(float(x) for x in self.freqs)
        if len(exch) != 6 or len(freqs) != 4:
            raise PhyloError("GTR needs 6 exchangeabilities and 4 frequencies.")
        if not all(math.isfinite(x) and x > 0 for x in exch + freqs):
            raise PhyloError("GTR parameters must be finite and positive.")
        if abs(math.fsum(freqs) - 1.0) > 1e-12:
            raise PhyloError(f"Base frequencies sum to {math.fsum(freqs)!r}, not 1.")
        object.__setattr__(self, "exch", exch)
        object.__setattr__(self, "freqs", freqs)

    @classmethod
    def jukes_cantor(cls) -> "GtrParams":
        return cls((1.0,) * 6, (0.25,) * 4)


def expand_exchangeabilities(nst: int, free: Sequence[float]) -> Tuple[float, ...]:
    """Map an nst-constrained rate vector onto the six GTR exchangeabilities."""
    if nst == 6:
        if len(free) != 6:
            raise PhyloError("nst=6 needs six rates.")
        return tuple(float(x) for x in free)
    if nst == 2:
        transversion, transition = (float(x) for x in free)
        return tuple(transition if label in TRANSITIONS else transversion for label in PAIR_LABELS)
    if nst == 1:
        return (1.0,) * 6
    raise PhyloError(f"nst={nst} is not supported.")


def rate_matrix(g: GtrParams) -> np.ndarray:
    """GTR Q scaled to one expected substitution per unit branch length."""
    freqs = np.asarray(g.freqs)
    q = np.zeros((4, 4))
    for rate, (i, j) in zip(g.exch, PAIRS):
        q[i, j] = rate * freqs[j]
        q[j, i] = rate * freqs[i]
    np.fill_diagonal(q, -q.sum(axis=1))
    q /= -float(np.dot(freqs, np.diag(q)))
    return q


class RateMatrix:
    """Q plus a cached decomposition for computing P(t) = exp(Qt)."""

    def __init__(self, params: GtrParams):
        self.params = params
        self.freqs = np.asarray(params.freqs)
        self.q = rate_matrix(params)
        self.symmetric = math.sqrt(self.freqs.max() / self.freqs.min()) <= EIGEN_CONDITION_LIMIT
        if self.symmetric:
            root = np.sqrt(self.freqs)
            s = root[:, None] * self.q / root[None, :]
            eigenvalues, vectors = np.linalg.eigh((s + s.T) / 2.0)
            self.eigenvalues = eigenvalues
            self._left = vectors / root[:, None]
            self._right = vectors.T * root[None, :]
        else:
            LOG.debug("Frequency skew too large for the symmetric path; using expm")

    def probabilities(self, t: np.ndarray | float) -> np.ndarray:
        """Transition matrices for every entry of `t`; shape t.shape + (4, 4)."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise PhyloError("Branch length times rate must be finite and non-negative.")
        if self.symmetric:
            decay = np.exp(np.multiply.outer(t, self.eigenvalues))
            p = np.einsum("ik,...k,kj->...ij", self._left, decay, self._right)
        else:
            flat = [linalg.expm(self.q * x) for x in t.ravel()]
            p = np.array(flat).reshape(t.shape + (4, 4))
        if not np.all(np.isfinite(p)):
            raise NonFiniteResult("Transition probabilities are not finite.")
        np.clip(p, 0.0, 1.0, out=p)
        p[t == 0] = np.eye(4)
        return p


def transition_probs(q: RateMatrix, t: float, rate: float = 1.0) -> np.ndarray:
    if t < 0:
        raise PhyloError("Branch length must be non-negative.")
    if rate <= 0:
        raise PhyloError("Rate multiplier must be positive.")
    return q.probabilities(t * rate)


def discrete_gamma_rates(alpha: float, ncat: int) -> Tuple[float, ...]:
    """Mean rate of each equal-probability slice of Gamma(alpha, alpha)."""
    if ncat == 1:
        return (1.0,)
    cuts = special.gammaincinv(alpha, np.arange(1, ncat) / ncat)
    mass = np.concatenate(([0.0], special.gammainc(alpha + 1.0, cuts), [1.0]))
    rates = ncat * np.diff(mass)
    rates /= rates.mean()
    return tuple(float(x) for x in rates)


@dataclass(frozen=True)
class GammaRates:
    alpha: float
    ncat: int = 4
    rates: Tuple[float, ...] = field(init=False)

    def __post_init__(self) -> None:
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise PhyloError("Gamma shape must be positive.")
        if self.ncat < 1:
            raise PhyloError("Need at least one rate category.")
        rates = discrete_gamma_rates(float(self.alpha), int(self.ncat))
        if not all(math.isfinite(r) and r > 0 for r in rates):
            raise NonFiniteResult(f"Degenerate gamma rates for alpha={self.alpha!r}")
        object.__setattr__(self, "rates", rates)

    @classmethod
    def equal(cls) -> "GammaRates":
        return cls(1.0, 1)


# ---- Likelihood -------------------------------------------------------------


class LikelihoodEngine:
    """Pruning likelihood over the compressed site patterns of one alignment."""

    def __init__(self, alignment: Alignment):
        self.alignment = alignment
        self.index = {name: i for i, name in enumerate(alignment.taxa)}
        if alignment.n_sites:
            matrix = np.frombuffer("".join(alignment.rows).encode("ascii"), dtype=np.uint8)
            matrix = matrix.reshape(alignment.n_taxa, alignment.n_sites)
            patterns, counts = np.unique(matrix.T, axis=0, return_counts=True)
            self.weights = counts.astype(np.float64)
            self.tips = TIP_TABLE[patterns.T]  # (taxa, patterns, 4)
        else:
            self.weights = np.zeros(0)
            self.tips = np.zeros((alignment.n_taxa, 0, 4))
        LOG.debug("Compressed %d sites into %d patterns", alignment.n_sites, len(self.weights))

    @property
    def n_patterns(self) -> int:
        return len(self.weights)

    def _tip_rows(self, tree: Tree) -> List[int]:
        if set(tree.leaves) != set(self.index):
            missing = sorted(set(self.index) - set(tree.leaves))
            extra = sorted(set(tree.leaves) - set(self.index))
            raise TaxonMismatch(missing, extra)
        return [self.index[name] for name in tree.leaves]

    def log_likelihood(
        self,
        tree: Tree,
        model: RateMatrix,
        gamma: GammaRates,
        root: Optional[int] = None,
    ) -> float:
        rows = self._tip_rows(tree)
        if not self.n_patterns:
            return 0.0
        if root is None:
            root = tree.n_leaves if tree.n_nodes > tree.n_leaves else 0
        rates = np.asarray(gamma.rates)
        ncat = len(rates)
        # transposed so that partial @ p_t[edge] sums over child states
        p_t = model.probabilities(np.multiply.outer(tree.lengths, rates)).swapaxes(-1, -2)  # (E, C, 4, 4)
        log_scale = np.zeros(self.n_patterns)
        pending: Dict[int, np.ndarray] = {}
        partial = None
        for node, parent, edge in tree.postorder(root):
            partial = pending.pop(node, None)
            if node < tree.n_leaves:
                tip = self.tips[rows[node]]
                partial = np.broadcast_to(tip, (ncat,) + tip.shape) if partial is None else partial * tip
            else:
                largest = partial.max(axis=(0, 2))  # type: ignore[union-attr]
                small = (largest < SCALE_THRESHOLD) & (largest > 0)
                if small.any():
                    partial = partial.copy()  # type: ignore[union-attr]
                    partial[:, small, :] /= largest[small][None, :, None]
                    log_scale[small] += np.log(largest[small])
            if parent >= 0:
                message = partial @ p_t[edge]
                pending[parent] = message if parent not in pending else pending[parent] * message
        site = np.einsum("cki,i->k", partial, model.freqs) / ncat  # type: ignore[arg-type]
        with np.errstate(divide="ignore"):
            total = float(np.dot(self.weights, np.log(site) + log_scale))
        if not math.isfinite(total):
            raise NonFiniteResult("Log-likelihood is not finite.")
        return total


def log_likelihood(tree: Tree, alignment: Alignment, g: GtrParams, gr: GammaRates, root: Optional[int] = None) -> float:
    return LikelihoodEngine(alignment).log_likelihood(tree, RateMatrix(g), gr, root)


# ---- Simulation -------------------------------------------------------------


def simulate_alignment(tree: Tree, g: GtrParams, gr: GammaRates, n_sites: int, seed: int) -> Alignment:
    """Evolve independent sites down the tree from a stationary draw at leaf 0."""
    if n_sites < 0:
        raise PhyloError("n_sites must be non-negative.")
    rng = np.random.default_rng(seed)
    model = RateMatrix(g)
    categories = rng.integers(len(gr.rates), size=n_sites)
    p = model.probabilities(np.multiply.outer(tree.lengths, np.asarray(gr.rates)))
    states = np.zeros((tree.n_nodes, n_sites), dtype=np.int64)
    order = tree.postorder(0)
    states[0] = rng.choice(4, size=n_sites, p=model.freqs)
    for node, parent, edge in reversed(order[:-1]):
        rows = p[edge, categories, states[parent]]  # (sites, 4)
        draws = rng.random(n_sites)
        states[node] = np.minimum((rows.cumsum(axis=1) < draws[:, None]).sum(axis=1), 3)
    letters = np.array(list(NUCLEOTIDES))
    rows_text = tuple("".join(letters[states[leaf]]) for leaf in range(tree.n_leaves))
    return Alignment(tree.leaves, rows_text, n_sites)

"""Alignment readers and the NEXUS emitter used by the formatFileToNexus stage.

Supported inputs are NEXUS (DATA/CHARACTERS block only), relaxed Phylip
(sequential or interleaved), Clustal and FASTA. Every reader canonicalises
symbols to uppercase DNA with U folded into T, so a parsed alignment compares
equal regardless of the format it came from.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

LOG = logging.getLogger(__name__)

DNA_SYMBOLS = frozenset("ACGT")
AMBIGUITY_SYMBOLS = frozenset("RYSWKMBDHVN")
GAP = "-"
MISSING = "?"
ALPHABET = DNA_SYMBOLS | AMBIGUITY_SYMBOLS | {GAP, MISSING}

MAX_PHYLIP_NAME = 99

# Characters that force quoting of a taxon name in NEXUS output.
_NEXUS_PUNCTUATION = set("()[]{}/\\,;:=*'\"`<>^")
_CONSERVATION_LINE = re.compile(r"^[\s.:*]*$")
_WHITESPACE = re.compile(r"\s+")


class SeqFileFormat(str, Enum):
    """Closed set of alignment formats accepted by the pipeline."""

    NEXUS = "Nexus"
    PHYLIP = "Phylip"
    CLUSTAL = "Clustal"
    FASTA = "Fasta"

    @classmethod
    def parse(cls, value: "str | SeqFileFormat") -> "SeqFileFormat":
        if isinstance(value, SeqFileFormat):
            return value
        lowered = str(value).strip().lower()
        for member in cls:
            if member.value.lower() == lowered:
                return member
        aliases = {"nex": cls.NEXUS, "phy": cls.PHYLIP, "aln": cls.CLUSTAL, "fa": cls.FASTA, "fas": cls.FASTA}
        if lowered in aliases:
            return aliases[lowered]
        raise ValueError(f"Unknown sequence file format '{value}'.")


# ---- Errors -----------------------------------------------------------------


class SeqIOError(ValueError):
    """Raised when alignment input cannot be turned into a valid Alignment."""


class MalformedFile(SeqIOError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class RaggedAlignment(SeqIOError):
    def __init__(self, lengths: Dict[str, int], expected: Optional[int] = None):
        self.lengths = dict(lengths)
        self.expected = expected
        detail = ", ".join(f"{name}={length}" for name, length in lengths.items())
        target = f" (expected {expected})" if expected is not None else ""
        super().__init__(f"Rows have unequal lengths{target}: {detail}")


class DuplicateTaxon(SeqIOError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Duplicate taxon name '{name}'.")


class IllegalSymbol(SeqIOError):
    def __init__(self, symbol: str, taxon: str, position: int):
        self.symbol = symbol
        self.taxon = taxon
        self.position = position
        super().__init__(f"Illegal symbol '{symbol}' in taxon '{taxon}' at site {position + 1}.")


# ---- Alignment value --------------------------------------------------------


def normalize_name(name: str) -> str:
    """Collapse whitespace runs inside a taxon name into underscores."""
    return _WHITESPACE.sub("_", name.strip())


def canonical_row(row: str) -> str:
    return row.upper().replace("U", "T")


@dataclass(frozen=True)
class Alignment:
    """Equal-length DNA rows keyed by unique taxon names."""

    taxa: Tuple[str, ...]
    rows: Tuple[str, ...]
    n_sites: int = field(default=-1)

    def __post_init__(self) -> None:
        taxa = tuple(normalize_name(name) for name in self.taxa)
        rows = tuple(canonical_row(row) for row in self.rows)
        if not taxa:
            raise SeqIOError("An alignment needs at least one taxon.")
        if len(taxa) != len(rows):
            raise SeqIOError(f"{len(taxa)} taxa but {len(rows)} rows.")
        seen = set()
        for name in taxa:
            if not name:
                raise SeqIOError("Taxon names must be non-empty.")
            if name in seen:
                raise DuplicateTaxon(name)
            seen.add(name)
        n_sites = len(rows[0]) if self.n_sites < 0 else self.n_sites
        if any(len(row) != n_sites for row in rows):
            raise RaggedAlignment({name: len(row) for name, row in zip(taxa, rows)}, n_sites)
        for name, row in zip(taxa, rows):
            for position, symbol in enumerate(row):
                if symbol not in ALPHABET:
                    raise IllegalSymbol(symbol, name, position)
        object.__setattr__(self, "taxa", taxa)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "n_sites", n_sites)

    @property
    def n_taxa(self) -> int:
        return len(self.taxa)

    def row(self, name: str) -> str:
        return self.rows[self.taxa.index(name)]

    def items(self) -> Iterable[Tuple[str, str]]:
        return zip(self.taxa, self.rows)


@dataclass(frozen=True)
class ParsedAlignment:
    alignment: Alignment
    warnings: Tuple[str, ...] = ()


def _build(pairs: Sequence[Tuple[str, str]], expected_sites: Optional[int] = None) -> Alignment:
    names = [normalize_name(name) for name, _ in pairs]
    rows = [canonical_row(row) for _, row in pairs]
    lengths = {name: len(row) for name, row in zip(names, rows)}
    if expected_sites is not None and any(length != expected_sites for length in lengths.values()):
        raise RaggedAlignment(lengths, expected_sites)
    if len(set(lengths.values())) > 1:
        raise RaggedAlignment(lengths)
    return Alignment(tuple(names), tuple(rows), expected_sites if expected_sites is not None else -1)


def _decode(data: bytes | str) -> List[str]:
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError:
            text = data.decode("latin-1")
    else:
        text = data
    if text.startswith("\ufeff"):
        text = text[1:]
    return text.replace("\r\n", "\n").replace("\r", "\n").split("\n")


def _strip_spaces(chunk: str) -> str:
    return "".join(chunk.split())


# ---- FASTA ------------------------------------------------------------------


def _read_fasta(lines: List[str]) -> ParsedAlignment:
    pairs: List[Tuple[str, List[str]]] = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            header = line[1:].strip()
            if not header:
                raise MalformedFile("FASTA header without a name", lineno)
            pairs.append((header.split()[0], []))
            continue
        if not pairs:
            raise MalformedFile("Sequence data before the first '>' header", lineno)
        pairs[-1][1].append(_strip_spaces(line))
    if not pairs:
        raise MalformedFile("No FASTA records found")
    return ParsedAlignment(_build([(name, "".join(chunks)) for name, chunks in pairs]))


# ---- Phylip -----------------------------------------------------------------


def _phylip_name(line: str, lineno: int) -> Tuple[str, str]:
    parts = line.strip().split(None, 1)
    name = parts[0]
    if len(name) > MAX_PHYLIP_NAME:
        raise MalformedFile(f"Taxon name longer than {MAX_PHYLIP_NAME} characters", lineno)
    return name, _strip_spaces(parts[1]) if len(parts) > 1 else ""


def _phylip_sequential(
    body: List[Tuple[int, str]], ntax: int, nchar: int, check_symbols: bool = True
) -> Optional[List[Tuple[str, str]]]:
    """Sequential layout, or None when the lines do not add up to it.

    With `check_symbols`, a continuation line holding non-sequence characters is
    taken as a sign of an interleaved file instead.
    """
    pairs: List[Tuple[str, str]] = []
    current: Optional[List] = None
    for lineno, line in body:
        if current is None or len(current[1]) >= nchar:
            if len(pairs) == ntax:
                return None
            name, chunk = _phylip_name(line, lineno)
            current = [name, chunk]
            pairs.append(current)  # type: ignore[arg-type]
        else:
            chunk = _strip_spaces(line)
            if check_symbols and not set(canonical_row(chunk)) <= ALPHABET:
                return None
            current[1] += chunk
        if len(current[1]) > nchar:
            return None
    if len(pairs) != ntax or any(len(seq) != nchar for _, seq in pairs):
        return None
    return [(name, seq) for name, seq in pairs]


def _phylip_interleaved(body: List[Tuple[int, str]], ntax: int, nchar: int) -> List[Tuple[str, str]]:
    names: List[str] = []
    chunks: List[List[str]] = []
    for index, (lineno, line) in enumerate(body):
        if index < ntax:
            name, chunk = _phylip_name(line, lineno)
            names.append(name)
            chunks.append([chunk])
        else:
            chunks[index % ntax].append(_strip_spaces(line))
    pairs = [(name, "".join(parts)) for name, parts in zip(names, chunks)]
    if any(len(seq) != nchar for _, seq in pairs):
        raise RaggedAlignment({name: len(seq) for name, seq in pairs}, nchar)
    if len(pairs) != ntax:
        raise MalformedFile(f"Header declares {ntax} taxa but {len(pairs)} were found")
    if len(body) % ntax:
        raise MalformedFile("Interleaved blocks do not cover every taxon", body[-1][0])
    return pairs


def _read_phylip(lines: List[str]) -> ParsedAlignment:
    numbered = [(lineno, line) for lineno, line in enumerate(lines, 1) if line.strip()]
    if not numbered:
        raise MalformedFile("Empty Phylip file")
    header_line, header = numbered[0]
    fields = header.split()
    if len(fields) < 2 or not fields[0].isdigit() or not fields[1].isdigit():
        raise MalformedFile("Phylip header must be '<ntax> <nchar>'", header_line)
    ntax, nchar = int(fields[0]), int(fields[1])
    if ntax < 1:
        raise MalformedFile("Phylip header declares no taxa", header_line)
    body = numbered[1:]
    pairs = _phylip_sequential(body, ntax, nchar)
    if pairs is None:
        try:
            pairs = _phylip_interleaved(body, ntax, nchar)
        except SeqIOError:
            # counts fit a sequential file with bad symbols: report those instead
            pairs = _phylip_sequential(body, ntax, nchar, check_symbols=False)
            if pairs is None:
                raise
    return ParsedAlignment(_build(pairs, nchar))


# ---- Clustal ----------------------------------------------------------------


def _read_clustal(lines: List[str]) -> ParsedAlignment:
    numbered = [(lineno, line) for lineno, line in enumerate(lines, 1) if line.strip()]
    if not numbered or not numbered[0][1].lstrip().upper().startswith("CLUSTAL"):
        raise MalformedFile("Clustal files must start with a CLUSTAL header", numbered[0][0] if numbered else None)
    order: List[str] = []
    segments: Dict[str, List[str]] = {}
    for lineno, line in numbered[1:]:
        if line[:1].isspace() and _CONSERVATION_LINE.match(line):
            continue
        parts = line.split()
        if len(parts) < 2 or len(parts) > 3:
            raise MalformedFile("Expected '<name> <segment> [count]'", lineno)
        if len(parts) == 3 and not parts[2].isdigit():
            raise MalformedFile("Trailing residue count must be an integer", lineno)
        name, segment = parts[0], parts[1]
        if name not in segments:
            order.append(name)
            segments[name] = []
        segments[name].append(segment)
    if not order:
        raise MalformedFile("Clustal file contains no sequences")
    return ParsedAlignment(_build([(name, "".join(segments[name])) for name in order]))


# ---- NEXUS ------------------------------------------------------------------


@dataclass(frozen=True)
class NexusStatement:
    text: str
    line: int


def nexus_statements(lines: List[str]) -> List[NexusStatement]:
    """Split NEXUS text on ';' outside quotes, dropping [...] comments."""
    statements: List[NexusStatement] = []
    buffer: List[str] = []
    depth = 0
    quoted = False
    line = 1
    start: Optional[int] = None
    for char in "\n".join(lines):
        if char == "\n":
            line += 1
        if depth:
            if char == "[":
                depth += 1
            elif char == "]":
                depth -= 1
            elif char == "\n":
                buffer.append(char)
            continue
        if quoted:
            buffer.append(char)
            if char == "'":
                quoted = False
            continue
        if char == "[":
            depth = 1
            continue
        if char == "'":
            quoted = True
        if char == ";":
            statements.append(NexusStatement("".join(buffer), start or line))
            buffer, start = [], None
            continue
        if start is None and not char.isspace():
            start = line
        buffer.append(char)
    if depth:
        raise MalformedFile("Unterminated [comment]", line)
    if quoted:
        raise MalformedFile("Unterminated quoted token", line)
    if "".join(buffer).strip():
        raise MalformedFile("Statement is not terminated by ';'", start)
    return statements


def _nexus_tokens(text: str) -> List[str]:
    return re.findall(r"'(?:[^']|'')*'|[^\s=]+|=", text)


def _unquote(token: str) -> str:
    if len(token) >= 2 and token[0] == token[-1] == "'":
        return token[1:-1].replace("''", "'")
    return token


def _options(tokens: List[str]) -> Dict[str, str]:
    options: Dict[str, str] = {}
    index = 0
    while index < len(tokens):
        key = tokens[index].lower()
        if index + 2 < len(tokens) and tokens[index + 1] == "=":
            options[key] = _unquote(tokens[index + 2])
            index += 3
        else:
            options[key] = ""
            index += 1
    return options


def _matrix_rows(statement: NexusStatement) -> List[Tuple[str, str]]:
    text = statement.text
    lead = text[: len(text) - len(text.lstrip())].count("\n")
    body = re.sub(r"^\s*matrix\b", "", text, count=1, flags=re.IGNORECASE)
    pairs: List[Tuple[str, str]] = []
    for offset, raw in enumerate(body.split("\n")):
        stripped = raw.strip()
        if not stripped:
            continue
        lineno = statement.line - lead + offset
        if stripped.startswith("'"):
            match = re.match(r"'((?:[^']|'')*)'(.*)", stripped)
            if not match:
                raise MalformedFile("Unterminated quoted taxon name", lineno)
            pairs.append((match.group(1).replace("''", "'"), _strip_spaces(match.group(2))))
        else:
            parts = stripped.split(None, 1)
            pairs.append((parts[0], _strip_spaces(parts[1]) if len(parts) > 1 else ""))
    return pairs


def _read_nexus(lines: List[str]) -> ParsedAlignment:
    first = next((index for index, line in enumerate(lines) if line.strip()), None)
    if first is None or not lines[first].strip().upper().startswith("#NEXUS"):
        raise MalformedFile("NEXUS files must start with #NEXUS", None if first is None else first + 1)
    lines = list(lines)
    lines[first] = ""

    warnings: List[str] = []

    def warn(message: str) -> None:
        warnings.append(message)
        LOG.warning(message)

    block: Optional[str] = None
    found_data = False
    dims: Dict[str, str] = {}
    gap_symbol, missing_symbol = GAP, MISSING
    matrix: Optional[List[Tuple[str, str]]] = None

    for statement in nexus_statements(lines):
        tokens = _nexus_tokens(statement.text)
        if not tokens:
            continue
        command = tokens[0].lower()
        if block is None:
            if command != "begin" or len(tokens) < 2:
                raise MalformedFile(f"Expected 'begin <block>;' but found '{tokens[0]}'", statement.line)
            block = tokens[1].lower()
            if block in ("data", "characters"):
                if found_data:
                    raise MalformedFile("Only one DATA block is supported", statement.line)
                found_data = True
            else:
                warn(f"Skipping unsupported NEXUS block '{tokens[1]}'")
            continue
        if command in ("end", "endblock"):
            block = None
            continue
        if block not in ("data", "characters"):
            continue
        if command == "dimensions":
            dims.update(_options(tokens[1:]))
        elif command == "format":
            opts = _options(tokens[1:])
            datatype = opts.pop("datatype", "dna").lower()
            if datatype not in ("dna", "nucleotide", "rna"):
                raise MalformedFile(f"Unsupported datatype '{datatype}'", statement.line)
            gap_symbol = opts.pop("gap", GAP) or GAP
            missing_symbol = opts.pop("missing", MISSING) or MISSING
            opts.pop("interleave", None)
            for key in opts:
                warn(f"Ignoring format option '{key}'")
        elif command == "matrix":
            if matrix is not None:
                raise MalformedFile("Duplicate matrix command", statement.line)
            matrix = _matrix_rows(statement)
        else:
            warn(f"Ignoring DATA command '{tokens[0]}'")

    if block is not None:
        raise MalformedFile(f"Block '{block}' is missing 'end;'", len(lines))
    if matrix is None:
        raise MalformedFile("No DATA block with a matrix found")

    # interleaved matrices repeat names; concatenate in first-seen order
    order: List[str] = []
    chunks: Dict[str, List[str]] = {}
    for name, chunk in matrix:
        if name not in chunks:
            order.append(name)
            chunks[name] = []
        chunks[name].append(chunk)

    pairs = []
    for name in order:
        row = "".join(chunks[name])
        if gap_symbol != GAP:
            row = row.replace(gap_symbol, GAP)
        if missing_symbol != MISSING:
            row = row.replace(missing_symbol, MISSING)
        pairs.append((name, row))
    nchar = int(dims["nchar"]) if dims.get("nchar", "").isdigit() else None
    alignment = _build(pairs, nchar)
    if dims.get("ntax", "").isdigit() and int(dims["ntax"]) != alignment.n_taxa:
        raise MalformedFile(f"dimensions ntax={dims['ntax']} but the matrix holds {alignment.n_taxa} taxa")
    return ParsedAlignment(alignment, tuple(warnings))


_READERS = {
    SeqFileFormat.NEXUS: _read_nexus,
    SeqFileFormat.PHYLIP: _read_phylip,
    SeqFileFormat.CLUSTAL: _read_clustal,
    SeqFileFormat.FASTA: _read_fasta,
}


def read_alignment(data: bytes | str, fmt: "SeqFileFormat | str") -> ParsedAlignment:
    """Parse an alignment and return it together with any warning records."""
    if not data:
        raise MalformedFile("Empty input")
    return _READERS[SeqFileFormat.parse(fmt)](_decode(data))


def parse_alignment(data: bytes | str, fmt: "SeqFileFormat | str") -> Alignment:
    return read_alignment(data, fmt).alignment


def sniff_format(data: bytes | str) -> SeqFileFormat:
    """Guess the format from the first meaningful line."""
    for line in _decode(data):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.upper().startswith("#NEXUS"):
            return SeqFileFormat.NEXUS
        if stripped.upper().startswith("CLUSTAL"):
            return SeqFileFormat.CLUSTAL
        if stripped.startswith(">"):
            return SeqFileFormat.FASTA
        fields = stripped.split()
        if len(fields) >= 2 and fields[0].isdigit() and fields[1].isdigit():
            return SeqFileFormat.PHYLIP
        break
    raise MalformedFile("Could not recognise the alignment format")


# ---- Emitters ---------------------------------------------------------------


def _nexus_name(name: str) -> str:
    if any(char in _NEXUS_PUNCTUATION for char in name):
        return "'" + name.replace("'", "''") + "'"
    return name


def write_nexus(alignment: Alignment) -> bytes:
    names = [_nexus_name(name) for name in alignment.taxa]
    width = max(len(name) for name in names)
    lines = [
        "#NEXUS",
        "",
        "begin data;",
        f"  dimensions ntax={alignment.n_taxa} nchar={alignment.n_sites};",
        f"  format datatype=dna gap={GAP} missing={MISSING};",
        "  matrix",
    ]
    lines.extend(f"  {name.ljust(width)} {row}" for name, row in zip(names, alignment.rows))
    lines.extend(["  ;", "end;", ""])
    return "\n".join(lines).encode("utf-8")


def write_phylip(alignment: Alignment) -> bytes:
    width = max(len(name) for name in alignment.taxa)
    lines = [f"{alignment.n_taxa} {alignment.n_sites}"]
    lines.extend(f"{name.ljust(width)}  {row}" for name, row in alignment.items())
    lines.append("")
    return "\n".join(lines).encode("utf-8")


def write_fasta(alignment: Alignment) -> bytes:
    lines: List[str] = []
    for name, row in alignment.items():
        lines.append(f">{name}")
        lines.append(row)
    lines.append("")
    return "\n".join(lines).encode("utf-8")


WRITERS = {
    SeqFileFormat.NEXUS: write_nexus,
    SeqFileFormat.PHYLIP: write_phylip,
    SeqFileFormat.FASTA: write_fasta,
}


def convert_to_nexus(data: bytes | str, fmt: "SeqFileFormat | str") -> bytes:
    """Parse any supported format and re-emit it as canonical NEXUS."""
    fmt = SeqFileFormat.parse(fmt)
    parsed = read_alignment(data, fmt)
    LOG.info("Converted %s alignment with %d taxa x %d sites", fmt.value, parsed.alignment.n_taxa, parsed.alignment.n_sites)
    return write_nexus(parsed.alignment)

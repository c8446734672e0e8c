"""Command line for PhyloGrid: submit analyses to the simulated grid and run the standalone tools."""

from __future__ import annotations

import argparse
import logging
import os
import posixpath
import sys
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, Field, ValidationError, field_validator

import cli_ui
from consensus import asdsf, burn_in_filter, majority_rule_consensus, read_tree_trace, split_table, write_consensus
from gridsim import MCMC_EXECUTABLE, Grid, GridConfig, GridError, Resource, key_value_lines, load_grid_config
from mbscript import DEFAULT_SEED, MAX_SEED, McmcSettings, ModelSpec
from phylo import GammaRates, GtrParams, count_unrooted_trees, log10_unrooted_trees, parse_newick, simulate_alignment
from seqio import WRITERS, SeqFileFormat, convert_to_nexus, sniff_format
from storage_element import IntegrityError, StorageElement, StorageError, content_digest, default_storage_dir
from workflow import JobParams, MrBayesParams, StageFailed, WorkflowInputs, WorkflowRun, load_run, run_workflow

LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_WORKFLOW = 3
EXIT_INTEGRITY = 4

CONFIG_ENV = "PHYLOGRID_CONFIG"
DEFAULT_RESOURCE = Resource("local", frozenset({MCMC_EXECUTABLE}))


class CliError(Exception):
    """A user-facing failure with an exit code."""

    def __init__(self, message: str, code: int = EXIT_INPUT):
        self.code = code
        super().__init__(message)


# ---- Configuration ----------------------------------------------------------


class CliConfig(BaseModel):
    """Settings shared by every subcommand; flags override the config file."""

    grid_config_path: Optional[Path] = Field(None, description="Grid description file; one local resource when unset.")
    storage_dir: Path = Field(default_factory=default_storage_dir, description="Directory holding the storage element.")
    default_seed: int = Field(DEFAULT_SEED, ge=0, le=MAX_SEED, description="Seed used when --seed is not given.")
    output_format: Literal["plain", "json-lines"] = Field("plain", description="Rendering of command results.")

    @field_validator("storage_dir")
    @classmethod
    def _writable(cls, value: Path) -> Path:
        value = value.expanduser()
        try:
            value.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ValueError(f"storage_dir {value} is not writable: {exc}") from exc
        if not os.access(value, os.W_OK):
            raise ValueError(f"storage_dir {value} is not writable")
        return value


_CONFIG_KEYS = {
    "grid_config": "grid_config_path",
    "grid_config_path": "grid_config_path",
    "storage_dir": "storage_dir",
    "default_seed": "default_seed",
    "output_format": "output_format",
}


def read_config_file(path: Path) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, key, value in key_value_lines(
        _read_text(path), error=lambda message, line: CliError(f"{path}:{line}: {message}")
    ):
        field_name = _CONFIG_KEYS.get(key.lower())
        if field_name is None:
            raise CliError(f"{path}:{lineno}: unknown config key '{key}'")
        values[field_name] = value
    return values


def load_cli_config(args: argparse.Namespace) -> CliConfig:
    """File named by --config (or PHYLOGRID_CONFIG), then flags on top."""
    path = args.config or os.environ.get(CONFIG_ENV)
    values: Dict[str, object] = dict(read_config_file(Path(path))) if path else {}
    if args.storage_dir:
        values["storage_dir"] = args.storage_dir
    if args.grid_config:
        values["grid_config_path"] = args.grid_config
    if args.output_format:
        values["output_format"] = args.output_format
    return CliConfig(**values)


# ---- Helpers ----------------------------------------------------------------


def _read_bytes(path: Path | str) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"No such file: {path}")
    return path.read_bytes()


def _read_text(path: Path | str) -> str:
    return _read_bytes(path).decode("utf-8")


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _emit_records(config: CliConfig, records: Sequence[Dict[str, object]], plain: Callable[[], str]) -> None:
    if config.output_format == "json-lines":
        for record in records:
            _emit(cli_ui.json_line(record))
    else:
        _emit(plain())


def _emit_artifact(config: CliConfig, name: str, content: str) -> None:
    if config.output_format == "json-lines":
        _emit(cli_ui.json_line({"artifact": name, "content": content}))
    else:
        sys.stdout.write(content)


def open_storage(config: CliConfig) -> StorageElement:
    return StorageElement(config.storage_dir)


def build_grid(config: CliConfig, storage: StorageElement) -> Grid:
    if config.grid_config_path is None:
        return Grid.from_config(GridConfig(resources=(DEFAULT_RESOURCE,)), storage)
    return Grid.from_config(load_grid_config(_read_text(config.grid_config_path)), storage)


def _tags(value: str) -> tuple[str, ...]:
    return tuple(tag.strip() for tag in value.split(",") if tag.strip())


# ---- Commands ---------------------------------------------------------------


def cmd_submit(args: argparse.Namespace, config: CliConfig) -> int:
    data = _read_bytes(args.alignment)
    fmt = SeqFileFormat.parse(args.format) if args.format else sniff_format(data)
    if args.proxy:
        LOG.debug("Ignoring --proxy %s: the simulated grid needs no credentials", args.proxy)

    overrides = {
        "nruns": args.nruns,
        "ngen": args.ngen,
        "samplefreq": args.samplefreq,
        "nchains": args.nchains,
        "heat_lambda": args.temp,
    }
    settings = McmcSettings(
        seed=config.default_seed if args.seed is None else args.seed,
        **{key: value for key, value in overrides.items() if value is not None},
    )
    model_options = {"nst": args.nst, "rates": args.rates}
    model = ModelSpec(**{key: value for key, value in model_options.items() if value is not None})
    job_options: Dict[str, object] = {"name": args.name, "description": args.description, "rank_hint": args.rank}
    if args.requirements:
        job_options["requirements"] = _tags(args.requirements)
    inputs = WorkflowInputs(
        mrbayes_params=MrBayesParams(model=model, mcmc=settings, extra_blocks=args.extra_blocks, burnin=args.burnin),
        job_params=JobParams(**{key: value for key, value in job_options.items() if value is not None}),
        seq_file=data,
        seq_file_format=fmt,
    )

    storage = open_storage(config)
    try:
        run = run_workflow(inputs, build_grid(config, storage))
    except StageFailed as exc:
        failed = exc.run
        if failed is not None:
            _print_run_id(config, failed)
        raise
    finally:
        storage.close()
    _print_run_id(config, run)
    cli_ui.print_status(f"Run {run.run_id} finished with {len(run.output_refs)} outputs", kind="success")
    return EXIT_OK


def _print_run_id(config: CliConfig, run: WorkflowRun) -> None:
    if config.output_format == "json-lines":
        _emit(cli_ui.json_line({"run_id": run.run_id, "status": run.status, "job_id": run.job_id}))
    else:
        _emit(run.run_id)


def cmd_status(args: argparse.Namespace, config: CliConfig) -> int:
    storage = open_storage(config)
    try:
        run = load_run(storage, args.run_id)
    finally:
        storage.close()

    records = [
        {
            "run_id": run.run_id,
            "stage": stage.name,
            "status": stage.outcome,
            "start": stage.start,
            "end": stage.end,
            "polls": stage.polls,
            "detail": stage.detail,
        }
        for stage in run.stage_log
    ]

    def plain() -> str:
        summary = [f"name: {run.name}", f"status: {run.status}", f"job: {run.job_id or '-'}"]
        if run.asdsf is not None:
            summary.append(f"asdsf: {run.asdsf:.6f}")
        summary.append(f"outputs: {len(run.output_refs)}")
        rows = [
            (
                stage.name,
                stage.outcome,
                f"{stage.start:g}",
                "-" if stage.end is None else f"{stage.end:g}",
                "-" if stage.polls is None else stage.polls,
                stage.detail,
            )
            for stage in run.stage_log
        ]
        table = cli_ui.format_table(
            ("stage", "status", "start", "end", "polls", "detail"),
            rows,
            styles={1: cli_ui.OUTCOME_STYLES},
        )
        return cli_ui.format_panel(f"run {run.run_id}", summary) + "\n" + table

    _emit_records(config, records, plain)
    return EXIT_OK


def cmd_fetch(args: argparse.Namespace, config: CliConfig) -> int:
    storage = open_storage(config)
    dest = Path(args.dest)
    records: List[Dict[str, object]] = []
    try:
        run = load_run(storage, args.run_id)
        dest.mkdir(parents=True, exist_ok=True)
        for key in run.output_refs:
            data = storage.get(key)
            expected = run.digests.get(key)
            found = content_digest(data)
            if expected is not None and found != expected:
                raise IntegrityError(key, expected, found)
            target = dest / posixpath.basename(key)
            target.write_bytes(data)
            records.append({"key": key, "path": str(target), "sha256": found})
    finally:
        storage.close()
    _emit_records(config, records, lambda: "\n".join(str(record["path"]) for record in records))
    return EXIT_OK


def cmd_convert(args: argparse.Namespace, config: CliConfig) -> int:
    data = _read_bytes(args.input)
    fmt = SeqFileFormat.parse(args.source_format) if args.source_format else sniff_format(data)
    _emit_artifact(config, "nexus", convert_to_nexus(data, fmt).decode("utf-8"))
    return EXIT_OK


def cmd_count_trees(args: argparse.Namespace, config: CliConfig) -> int:
    if args.log10:
        value: object = log10_unrooted_trees(args.n)
        plain = f"{value:.6f}"
    else:
        value = count_unrooted_trees(args.n)
        plain = str(value)
    if config.output_format == "json-lines":
        _emit(cli_ui.json_line({"n": args.n, "log10" if args.log10 else "count": value}))
    else:
        _emit(plain)
    return EXIT_OK


def cmd_consensus(args: argparse.Namespace, config: CliConfig) -> int:
    runs = [burn_in_filter(read_tree_trace(_read_bytes(path)), args.burnin) for path in args.trees]
    pooled = [sample for run in runs for sample in run]
    tree = majority_rule_consensus(pooled, threshold=args.threshold)
    comments = [f"samples={len(pooled)} burnin={args.burnin:g}"]
    if len(runs) >= 2:
        comments.append(f"asdsf={asdsf(*runs):.6f}")
    content = write_consensus(tree).decode("utf-8") + "\n" + split_table(tree.splits, comments).decode("utf-8")
    _emit_artifact(config, "consensus", content)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, config: CliConfig) -> int:
    text = args.newick
    candidate = Path(text)
    try:
        if candidate.is_file():
            text = candidate.read_text(encoding="utf-8")
    except OSError:
        pass
    text = text.strip()
    if not text.endswith(";"):
        text += ";"
    rates = GammaRates(args.alpha) if args.alpha is not None else GammaRates.equal()
    seed = config.default_seed if args.seed is None else args.seed
    alignment = simulate_alignment(parse_newick(text), GtrParams.jukes_cantor(), rates, args.sites, seed)
    fmt = SeqFileFormat.parse(args.format)
    writer = WRITERS.get(fmt)
    if writer is None:
        raise CliError(f"No writer for format {fmt.value}")
    _emit_artifact(config, fmt.value.lower(), writer(alignment).decode("utf-8"))
    return EXIT_OK


# ---- Entry point ------------------------------------------------------------


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phylogrid", description="Bayesian phylogenetic analyses on a simulated grid.")
    parser.add_argument("--config", help=f"CLI config file (defaults to ${CONFIG_ENV}).")
    parser.add_argument("--storage-dir", help="Directory of the storage element.")
    parser.add_argument("--grid-config", help="Grid description file.")
    parser.add_argument("--output-format", choices=("plain", "json-lines"), help="Result rendering.")
    parser.add_argument("--verbose", action="store_true", help="Log debug detail to stderr.")
    commands = parser.add_subparsers(dest="command", required=True)

    submit = commands.add_parser("submit", help="Run the workflow on an alignment.")
    submit.add_argument("alignment", help="Alignment file.")
    submit.add_argument("--format", help="nexus, phylip, clustal or fasta (sniffed when omitted).")
    submit.add_argument("--nst", type=int, choices=(1, 2, 6), help="Substitution types.")
    submit.add_argument("--rates", choices=("equal", "gamma"), help="Among-site rate variation.")
    submit.add_argument("--ngen", type=int, help="Generations per mcmc block.")
    submit.add_argument("--samplefreq", type=int, help="Sampling interval in generations.")
    submit.add_argument("--nruns", type=int, help="Independent runs.")
    submit.add_argument("--nchains", type=int, help="Chains per run.")
    submit.add_argument("--temp", type=float, help="Incremental heating parameter.")
    submit.add_argument("--seed", type=int, help="Master seed.")
    submit.add_argument("--requirements", help="Comma separated resource tags.")
    submit.add_argument("--rank", choices=("throughput", "speed"), help="Resource ranking policy.")
    submit.add_argument("--name", help="Job name.")
    submit.add_argument("--description", help="Job description.")
    submit.add_argument("--extra-blocks", type=int, default=0, help="Bare mcmc continuation blocks.")
    submit.add_argument("--burnin", type=float, default=0.25, help="Burn-in fraction for the consensus.")
    submit.add_argument("--proxy", help="Reserved for credentialed backends; ignored.")
    submit.set_defaults(handler=cmd_submit)

    status = commands.add_parser("status", help="Show a run's stage log.")
    status.add_argument("run_id")
    status.set_defaults(handler=cmd_status)

    fetch = commands.add_parser("fetch", help="Copy a run's outputs into a directory.")
    fetch.add_argument("run_id")
    fetch.add_argument("dest")
    fetch.set_defaults(handler=cmd_fetch)

    convert = commands.add_parser("convert", help="Convert an alignment to NEXUS on stdout.")
    convert.add_argument("input")
    convert.add_argument("source_format", nargs="?", help="Input format (sniffed when omitted).")
    convert.set_defaults(handler=cmd_convert)

    count = commands.add_parser("count-trees", help="Number of unrooted binary topologies for n taxa.")
    count.add_argument("n", type=int)
    count.add_argument("--log10", action="store_true", help="Print log10 of the count instead.")
    count.set_defaults(handler=cmd_count_trees)

    consensus = commands.add_parser("consensus", help="Majority-rule consensus of tree traces.")
    consensus.add_argument("trees", nargs="+", help="One .t file per run.")
    consensus.add_argument("--burnin", type=float, default=0.25, help="Fraction of samples dropped per run.")
    consensus.add_argument("--threshold", type=float, default=0.5, help="Minimum clade frequency.")
    consensus.set_defaults(handler=cmd_consensus)

    simulate = commands.add_parser("simulate", help="Simulate a JC alignment along a Newick tree.")
    simulate.add_argument("newick", help="Newick string or file.")
    simulate.add_argument("--sites", type=_positive_int, required=True)
    simulate.add_argument("--seed", type=int)
    simulate.add_argument("--alpha", type=float, help="Gamma shape; equal rates when omitted.")
    simulate.add_argument("--format", default="nexus", choices=("nexus", "phylip", "fasta"))
    simulate.set_defaults(handler=cmd_simulate)
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = load_cli_config(args)
        return args.handler(args, config)
    except CliError as exc:
        cli_ui.print_status(str(exc), kind="error")
        return exc.code
    except StageFailed as exc:
        cli_ui.print_status(f"Stage {exc.stage} failed: {exc.error}", kind="error")
        return EXIT_WORKFLOW
    except IntegrityError as exc:
        cli_ui.print_status(str(exc), kind="error")
        return EXIT_INTEGRITY
    except ValidationError as exc:
        details = "; ".join(error["msg"] for error in exc.errors())
        cli_ui.print_status(f"Invalid parameters: {details}", kind="error")
        return EXIT_INPUT
    except (ValueError, LookupError, OSError, GridError, StorageError) as exc:
        cli_ui.print_status(str(exc), kind="error")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""MrBayes batch-script subset: structured parameters in, executable block out.

The emitted block is the InputParams2runMB artifact. Only the commands the
pipeline drives are understood (set, execute, lset, mcmc, mcmcp, end); anything
else in a script is rejected so a typo never silently changes an analysis.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

LOG = logging.getLogger(__name__)

DEFAULT_NCHAINS = 4
DEFAULT_HEAT_LAMBDA = 0.1
DEFAULT_SEED = 1
MAX_SEED = 2**64 - 1


class Rates(str, Enum):
    EQUAL = "equal"
    GAMMA = "gamma"


class ModelSpec(BaseModel):
    """Substitution model selected by the `lset` command."""

    model_config = ConfigDict(frozen=True)

    nst: Literal[1, 2, 6] = Field(6, description="Number of substitution types: 1 (JC/F81), 2 (HKY-like), 6 (GTR).")
    rates: Rates = Field(Rates.GAMMA, description="Among-site rate variation: equal or discrete gamma.")


class McmcSettings(BaseModel):
    """Chain parameters carried by the first `mcmc`/`mcmcp` command."""

    model_config = ConfigDict(frozen=True)

    nruns: int = Field(2, ge=1, description="Independent analyses run side by side.")
    ngen: int = Field(1_000_000, ge=0, description="Generations per mcmc block.")
    samplefreq: int = Field(500, ge=1, description="Sample the cold chain every this many generations.")
    nchains: int = Field(DEFAULT_NCHAINS, ge=1, description="Chains per run; chain 0 is cold.")
    heat_lambda: float = Field(DEFAULT_HEAT_LAMBDA, ge=0.0, description="Incremental heating (MrBayes 'temp').")
    seed: int = Field(DEFAULT_SEED, ge=0, le=MAX_SEED, description="Master seed for every random stream.")

    @model_validator(mode="after")
    def _samplefreq_within_ngen(self) -> "McmcSettings":
        if self.ngen > 0 and self.samplefreq > self.ngen:
            raise ValueError(f"samplefreq ({self.samplefreq}) must not exceed ngen ({self.ngen})")
        return self


class MbScript(BaseModel):
    model_config = ConfigDict(frozen=True)

    autoclose: bool = True
    nowarn: bool = True
    execute_path: str = Field(..., min_length=1, description="Locator of the NEXUS data file.")
    model: ModelSpec = Field(default_factory=ModelSpec)
    mcmc: McmcSettings = Field(default_factory=McmcSettings)
    extra_mcmc_blocks: int = Field(0, ge=0, description="Bare 'mcmc' continuation commands.")
    start_command: Literal["mcmc", "mcmcp"] = Field("mcmc", description="Whether the parameter command starts a chain.")

    @property
    def blocks(self) -> int:
        """Number of ngen-long blocks actually executed."""
        return (1 if self.start_command == "mcmc" else 0) + self.extra_mcmc_blocks

    @property
    def total_generations(self) -> int:
        return self.mcmc.ngen * self.blocks

    def to_bytes(self) -> bytes:
        return _render(self)


@dataclass(frozen=True)
class ParsedScript:
    script: MbScript
    warnings: Tuple[str, ...] = ()


# ---- Errors -----------------------------------------------------------------


class ScriptError(ValueError):
    """Raised when a MrBayes block falls outside the supported subset."""


class UnknownCommand(ScriptError):
    def __init__(self, command: str):
        self.command = command
        super().__init__(f"Unknown MrBayes command '{command}'.")


class MissingCommand(ScriptError):
    def __init__(self, command: str):
        self.command = command
        super().__init__(f"Script has no '{command}' command.")


class MissingExecute(MissingCommand):
    def __init__(self) -> None:
        super().__init__("execute")


class OutOfOrderCommand(ScriptError):
    def __init__(self, command: str, after: str):
        self.command = command
        self.after = after
        super().__init__(f"Command '{command}' may not follow '{after}'.")


class BadValue(ScriptError):
    def __init__(self, option: str, value: str, reason: str = ""):
        self.option = option
        self.value = value
        detail = f": {reason}" if reason else ""
        super().__init__(f"Bad value '{value}' for option '{option}'{detail}")


# ---- Emit -------------------------------------------------------------------


def _yes(flag: bool) -> str:
    return "yes" if flag else "no"


def _format_real(value: float) -> str:
    return format(value, ".12g")


def _render(script: MbScript) -> bytes:
    settings = script.mcmc
    options = [f"nruns={settings.nruns}", f"ngen={settings.ngen}", f"samplefreq={settings.samplefreq}"]
    if settings.nchains != DEFAULT_NCHAINS:
        options.append(f"nchains={settings.nchains}")
    if settings.heat_lambda != DEFAULT_HEAT_LAMBDA:
        options.append(f"temp={_format_real(settings.heat_lambda)}")
    if settings.seed != DEFAULT_SEED:
        options.append(f"seed={settings.seed}")
    lines = [
        "begin mrbayes;",
        f"set autoclose={_yes(script.autoclose)} nowarn={_yes(script.nowarn)};",
        f"execute {script.execute_path};",
        f"lset nst={script.model.nst} rates={script.model.rates.value};",
        f"{script.start_command} {' '.join(options)};",
    ]
    lines.extend("mcmc ;" for _ in range(script.extra_mcmc_blocks))
    lines.append("end;")
    return ("\n".join(lines) + "\n").encode("utf-8")


def emit_script(
    model: ModelSpec,
    mcmc: McmcSettings,
    data_path: str,
    extra_blocks: int = 0,
    *,
    autoclose: bool = True,
    nowarn: bool = True,
) -> bytes:
    script = MbScript(
        autoclose=autoclose,
        nowarn=nowarn,
        execute_path=data_path,
        model=model,
        mcmc=mcmc,
        extra_mcmc_blocks=extra_blocks,
    )
    return script.to_bytes()


# ---- Parse ------------------------------------------------------------------

_COMMENT = re.compile(r"\[[^\[\]]*\]")
_MCMC_OPTIONS = {"nruns": "nruns", "ngen": "ngen", "samplefreq": "samplefreq", "nchains": "nchains", "temp": "heat_lambda", "seed": "seed"}
_COMMAND_ORDER = {"set": 0, "execute": 1, "lset": 2, "mcmc": 3, "mcmcp": 3}


def _strip_comments(text: str) -> str:
    previous = None
    while previous != text:
        previous, text = text, _COMMENT.sub("", text)
    if "[" in text or "]" in text:
        raise ScriptError("Unbalanced [comment] brackets")
    return text


def _split_options(tokens: List[str]) -> List[Tuple[str, str]]:
    joined = " ".join(tokens)
    joined = re.sub(r"\s*=\s*", "=", joined)
    pairs = []
    for token in joined.split():
        key, sep, value = token.partition("=")
        if not sep or not value:
            raise BadValue(key.lower(), value, "expected key=value")
        pairs.append((key.lower(), value))
    return pairs


def _flag(option: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("yes", "y", "true"):
        return True
    if lowered in ("no", "n", "false"):
        return False
    raise BadValue(option, value, "expected yes or no")


def _integer(option: str, value: str) -> int:
    if not re.fullmatch(r"[+]?\d+", value):
        raise BadValue(option, value, "expected a non-negative integer")
    return int(value)


def _real(option: str, value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise BadValue(option, value, "expected a number") from exc


def read_script(data: bytes | str) -> ParsedScript:
    """Parse a MrBayes block, returning the script plus tolerated-option warnings."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    text = _strip_comments(text)
    warnings: List[str] = []

    def warn(message: str) -> None:
        warnings.append(message)
        LOG.warning(message)

    statements = [part.strip() for part in text.split(";")]
    if statements and statements[-1]:
        raise ScriptError(f"Unterminated command '{statements[-1].split()[0]}'")
    statements = [part for part in statements if part]
    if statements and statements[0].upper().startswith("#NEXUS"):
        statements[0] = statements[0][len("#NEXUS") :].strip()
        if not statements[0]:
            statements.pop(0)

    fields: Dict[str, object] = {}
    model: Dict[str, object] = {}
    settings: Dict[str, object] = {}
    start_command: Optional[str] = None
    extra = 0
    last = "begin"
    in_block = False
    seen_end = False

    for statement in statements:
        tokens = statement.split()
        command = tokens[0].lower()
        if seen_end:
            raise OutOfOrderCommand(command, "end")
        if command == "begin":
            if in_block or len(tokens) != 2 or tokens[1].lower() != "mrbayes":
                raise ScriptError("Expected a single 'begin mrbayes;' block")
            in_block = True
            continue
        if command == "end":
            seen_end = True
            continue
        if command not in _COMMAND_ORDER:
            raise UnknownCommand(tokens[0])
        if last in _COMMAND_ORDER and _COMMAND_ORDER[command] < _COMMAND_ORDER[last]:
            raise OutOfOrderCommand(command, last)

        if command == "set":
            if last != "begin":
                raise OutOfOrderCommand(command, last)
            for key, value in _split_options(tokens[1:]):
                if key in ("autoclose", "nowarn"):
                    fields[key] = _flag(key, value)
                else:
                    warn(f"Ignoring set option '{key}'")
        elif command == "execute":
            if "execute_path" in fields:
                raise OutOfOrderCommand(command, "execute")
            if len(tokens) != 2:
                raise BadValue("execute", " ".join(tokens[1:]), "expected one file path")
            fields["execute_path"] = tokens[1]
        elif command == "lset":
            if model:
                raise OutOfOrderCommand(command, "lset")
            for key, value in _split_options(tokens[1:]):
                if key == "nst":
                    nst = _integer(key, value)
                    if nst not in (1, 2, 6):
                        raise BadValue(key, value, "nst must be 1, 2 or 6")
                    model["nst"] = nst
                elif key == "rates":
                    try:
                        model["rates"] = Rates(value.lower())
                    except ValueError as exc:
                        raise BadValue(key, value, "rates must be equal or gamma") from exc
                else:
                    warn(f"Ignoring lset option '{key}'")
            model.setdefault("nst", 6)
        else:
            if "execute_path" not in fields:
                raise MissingExecute()
            if start_command is None:
                start_command = command
                for key, value in _split_options(tokens[1:]):
                    target = _MCMC_OPTIONS.get(key)
                    if target is None:
                        warn(f"Ignoring {command} option '{key}'")
                    elif target == "heat_lambda":
                        settings[target] = _real(key, value)
                    else:
                        settings[target] = _integer(key, value)
            elif command == "mcmc" and len(tokens) == 1:
                extra += 1
            else:
                raise OutOfOrderCommand(command, "mcmc")
        last = command

    if not in_block:
        raise ScriptError("Script must be wrapped in 'begin mrbayes;'")
    if not seen_end:
        raise MissingCommand("end")
    if "execute_path" not in fields:
        raise MissingExecute()
    if start_command is None:
        raise MissingCommand("mcmc")

    try:
        mcmc = McmcSettings(**settings)
    except ValidationError as exc:
        error = exc.errors()[0]
        # the only model-level check is samplefreq <= ngen
        option = str(error["loc"][0]) if error["loc"] else "samplefreq"
        raise BadValue(option, str(settings.get(option, "")), error["msg"]) from exc
    script = MbScript(
        execute_path=str(fields["execute_path"]),
        autoclose=bool(fields.get("autoclose", True)),
        nowarn=bool(fields.get("nowarn", True)),
        model=ModelSpec(**model) if model else ModelSpec(),
        mcmc=mcmc,
        extra_mcmc_blocks=extra,
        start_command=start_command,  # type: ignore[arg-type]
    )
    return ParsedScript(script, tuple(warnings))


def parse_script(data: bytes | str) -> MbScript:
    return read_script(data).script

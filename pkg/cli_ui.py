"""Terminal rendering for the phylogrid command line: colours, status lines, panels and tables."""

from __future__ import annotations

import json
import os
import shutil
import sys
import textwrap
from typing import IO, Any, Iterable, Mapping, Optional, Sequence

# ANSI style codes
RESET = "\033[0m"
BOLD = "\033[1m"
DIM = "\033[2m"

PALETTE = {
    "accent": "\033[38;5;45m",
    "info": "\033[38;5;110m",
    "warning": "\033[38;5;221m",
    "error": "\033[38;5;203m",
    "success": "\033[38;5;120m",
    "muted": "\033[38;5;247m",
}

ICONS = {
    "info": "[i]",
    "success": "[+]",
    "warning": "[!]",
    "error": "[x]",
}

OUTCOME_STYLES = {"Succeeded": "success", "Failed": "error", "Blocked": "warning", "Running": "info"}

DEFAULT_WIDTH = 90
MIN_WIDTH = 48


def _supports_color(stream: IO[str]) -> bool:
    if os.environ.get("NO_COLOR"):
        return False
    isatty = getattr(stream, "isatty", None)
    return bool(isatty and isatty())


USE_COLOR = _supports_color(sys.stdout)


def color_text(
    text: str,
    style: str = "accent",
    *,
    bold: bool = False,
    dim: bool = False,
    enabled: Optional[bool] = None,
) -> str:
    if not (USE_COLOR if enabled is None else enabled):
        return text
    codes: list[str] = []
    if bold:
        codes.append(BOLD)
    if dim:
        codes.append(DIM)
    color = PALETTE.get(style, "")
    if color:
        codes.append(color)
    if not codes:
        return text
    return "".join(codes) + text + RESET


def print_status(message: str, kind: str = "info", stream: Optional[IO[str]] = None) -> None:
    """One-line status message; goes to stderr so stdout stays machine-readable."""
    out = stream or sys.stderr
    icon = ICONS.get(kind, "[*]")
    style = kind if kind in PALETTE else "info"
    print(color_text(f"{icon} {message}", style=style, enabled=_supports_color(out)), file=out)


def _terminal_width() -> int:
    try:
        columns = shutil.get_terminal_size((DEFAULT_WIDTH, 20)).columns
    except OSError:
        columns = DEFAULT_WIDTH
    return max(MIN_WIDTH, min(columns, 100))


def _wrap_lines(text: str, width: int) -> list[str]:
    lines: list[str] = []
    for raw_line in text.splitlines() or [""]:
        stripped = raw_line.rstrip()
        if not stripped:
            lines.append("")
            continue
        lines.extend(textwrap.wrap(stripped, width=width, replace_whitespace=False, drop_whitespace=False) or [""])
    return lines or [""]


def format_panel(
    title: str,
    body: str | Iterable[str] | None,
    *,
    style: str = "accent",
    width: int | None = None,
) -> str:
    full_width = max(MIN_WIDTH, min(width or _terminal_width(), 100))
    inner_width = full_width - 4
    if body is None:
        text = ""
    elif isinstance(body, str):
        text = body
    else:
        text = "\n".join(str(item) for item in body)

    frame = style if style in PALETTE else "accent"
    border = color_text("+" + "=" * (full_width - 2) + "+", style=frame)
    header = (title.strip() or "RUN")[: full_width - 4].center(full_width - 2)
    bar = color_text("|", style=frame)
    lines = [
        border,
        bar + color_text(header, style="muted", bold=True) + bar,
        color_text("|" + "-" * (full_width - 2) + "|", style=frame),
    ]
    for line in _wrap_lines(text, inner_width):
        lines.append(f"{bar} {line.ljust(inner_width)} {bar}")
    lines.append(border)
    return "\n".join(lines)


def format_table(
    headers: Sequence[str],
    rows: Iterable[Sequence[Any]],
    *,
    styles: Optional[Mapping[int, Mapping[str, str]]] = None,
) -> str:
    """Fixed-width table; `styles` maps a column index to value -> palette style."""
    cells = [[str(value) for value in row] for row in rows]
    widths = [len(header) for header in headers]
    for row in cells:
        for i, value in enumerate(row):
            widths[i] = max(widths[i], len(value))

    def render(row: Sequence[str], header: bool = False) -> str:
        parts = []
        for i, value in enumerate(row):
            padded = value.ljust(widths[i])
            if header:
                padded = color_text(padded, style="muted", bold=True)
            elif styles and i in styles and value in styles[i]:
                padded = color_text(padded, style=styles[i][value])
            parts.append(padded)
        return "  ".join(parts).rstrip()

    lines = [render(headers, header=True), "  ".join("-" * width for width in widths)]
    lines.extend(render(row) for row in cells)
    return "\n".join(lines)


def json_line(record: Mapping[str, Any]) -> str:
    """One JSON object per line, keys in insertion order."""
    return json.dumps(dict(record), ensure_ascii=False, separators=(",", ":"))

from __future__ import annotations

import io
import json

import cli_ui


def test_color_text_respects_switch():
    assert cli_ui.color_text("done", "success", enabled=False) == "done"
    colored = cli_ui.color_text("done", "success", bold=True, enabled=True)
    assert colored.startswith(cli_ui.BOLD + cli_ui.PALETTE["success"])
    assert colored.endswith(cli_ui.RESET)


def test_print_status_prefixes_icon():
    stream = io.StringIO()
    cli_ui.print_status("run started", kind="success", stream=stream)
    cli_ui.print_status("odd", kind="unknown", stream=stream)
    assert stream.getvalue().splitlines() == ["[+] run started", "[*] odd"]


def test_no_color_environment(monkeypatch):
    class Tty(io.StringIO):
        def isatty(self):
            return True

    assert cli_ui._supports_color(Tty())
    monkeypatch.setenv("NO_COLOR", "1")
    assert not cli_ui._supports_color(Tty())


def test_panel_layout(monkeypatch):
    monkeypatch.setattr(cli_ui, "USE_COLOR", False)
    panel = cli_ui.format_panel("run abc", ["status: Succeeded", "job: job-0001"], width=48)
    lines = panel.splitlines()
    assert lines[0] == "+" + "=" * 46 + "+"
    assert lines[1].strip("|").strip() == "run abc"
    assert lines[3] == "| status: Succeeded" + " " * 27 + " |"
    assert all(len(line) == 48 for line in lines)


def test_panel_wraps_long_lines(monkeypatch):
    monkeypatch.setattr(cli_ui, "USE_COLOR", False)
    panel = cli_ui.format_panel("t", "x " * 60, width=48)
    assert len(panel.splitlines()) > 5


def test_table_alignment(monkeypatch):
    monkeypatch.setattr(cli_ui, "USE_COLOR", False)
    table = cli_ui.format_table(("stage", "status"), [("runMrBayes", "Failed"), ("x", "Succeeded")])
    assert table.splitlines() == [
        "stage       status",
        "----------  ---------",
        "runMrBayes  Failed",
        "x           Succeeded",
    ]


def test_table_styles_apply_to_known_values(monkeypatch):
    monkeypatch.setattr(cli_ui, "USE_COLOR", True)
    table = cli_ui.format_table(("s",), [("Failed",), ("Other",)], styles={0: cli_ui.OUTCOME_STYLES})
    rows = table.splitlines()[2:]
    assert cli_ui.PALETTE["error"] in rows[0]
    assert rows[1] == "Other"


def test_json_line_is_compact():
    line = cli_ui.json_line({"run_id": "r", "polls": None, "name": "ü"})
    assert line == '{"run_id":"r","polls":null,"name":"ü"}'
    assert json.loads(line)["name"] == "ü"

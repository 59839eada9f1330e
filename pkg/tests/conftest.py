import os

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def extended_enabled() -> bool:
    return os.environ.get("STPROBE_EXTENDED", "") not in ("", "0")

"""Shared pytest hooks: surface the per-criterion pass/fail lines from the
acceptance suite in the terminal summary (fd-level capture would otherwise
swallow them)."""

criterion_lines: list[str] = []


def record_criterion(line: str):
    criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in criterion_lines:
            terminalreporter.write_line(line)

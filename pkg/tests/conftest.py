"""Collects the one-line verdicts printed by the acceptance tests."""

VERDICTS: list[str] = []


def record(criterion: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {criterion} [{title}]: {'PASS' if passed else 'FAIL'} ({detail})"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
